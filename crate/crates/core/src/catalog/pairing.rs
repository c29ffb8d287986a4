//! Nearest pre-image matching for post-disaster images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::geo::{haversine_distance, latitude_bound, GeoPoint};
use super::{ImageCatalog, Phase, StreetViewImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub pair_id: String,
    pub pre_id: String,
    pub post_id: String,
    /// Meters.
    pub pairing_distance: f64,
}

impl ImagePair {
    pub fn id_for(post_id: &str) -> String {
        format!("pair-{post_id}")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Discard {
    pub post_id: String,
    pub nearest_pre: String,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairingReport {
    pub max_distance: f64,
    /// Posts whose nearest pre image lies beyond the threshold.
    pub discarded: Vec<Discard>,
    /// Pre images matched by more than one post, with those posts.
    pub shared: BTreeMap<String, Vec<String>>,
    /// Images skipped because of non-finite coordinates.
    pub invalid: Vec<String>,
}

impl PairingReport {
    pub fn render(&self, pairs: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs: {pairs}");
        let _ = writeln!(s, "max_distance_m: {}", self.max_distance);
        let _ = writeln!(s, "discarded posts: {}", self.discarded.len());
        for d in &self.discarded {
            let _ = writeln!(
                s,
                "  discard {} nearest {} at {:.3} m",
                d.post_id, d.nearest_pre, d.distance
            );
        }
        let _ = writeln!(s, "shared pre images: {}", self.shared.len());
        for (pre, posts) in &self.shared {
            let _ = writeln!(s, "  shared {pre} <- {}", posts.join(" "));
        }
        let _ = writeln!(s, "invalid coordinates: {}", self.invalid.len());
        for id in &self.invalid {
            let _ = writeln!(s, "  invalid {id}");
        }
        s
    }
}

/// Pre images sorted by latitude for bounded nearest-neighbour search.
struct LatitudeIndex<'a> {
    pres: Vec<&'a StreetViewImage>,
}

impl<'a> LatitudeIndex<'a> {
    fn new(mut pres: Vec<&'a StreetViewImage>) -> Self {
        pres.sort_by(|a, b| a.latitude.total_cmp(&b.latitude).then_with(|| a.image_id.cmp(&b.image_id)));
        Self { pres }
    }

    /// Nearest pre image; ties go to the lexicographically smallest id.
    fn nearest(&self, q: GeoPoint) -> (&'a StreetViewImage, f64) {
        let start = self.pres.partition_point(|p| p.latitude < q.latitude);
        let mut best: Option<(&StreetViewImage, f64)> = None;
        let consider = |p: &'a StreetViewImage, best: &mut Option<(&'a StreetViewImage, f64)>| {
            let d = haversine_distance(q, p.location());
            let better = match best {
                None => true,
                Some((b, bd)) => d < *bd || (d == *bd && p.image_id < b.image_id),
            };
            if better {
                *best = Some((p, d));
            }
        };
        // Walk outward in latitude; the latitude gap bounds the distance from below.
        let (mut lo, mut hi) = (start, start);
        loop {
            // Slack keeps exact ties reachable despite rounding in the bound.
            let bound = best.map_or(f64::INFINITY, |(_, d)| d * (1.0 + 1e-12) + 1e-9);
            let up = (hi < self.pres.len()).then(|| latitude_bound(self.pres[hi].latitude, q.latitude));
            let down = (lo > 0).then(|| latitude_bound(self.pres[lo - 1].latitude, q.latitude));
            let up_ok = up.is_some_and(|g| g <= bound);
            let down_ok = down.is_some_and(|g| g <= bound);
            if !up_ok && !down_ok {
                break;
            }
            if up_ok && (!down_ok || up <= down) {
                consider(self.pres[hi], &mut best);
                hi += 1;
            } else {
                consider(self.pres[lo - 1], &mut best);
                lo -= 1;
            }
        }
        best.expect("index is non-empty")
    }
}

/// Match each post image to its globally nearest pre image.
///
/// Matches beyond `max_distance` meters are discarded; one pre image may
/// serve several posts. Output is sorted by `pair_id`.
pub fn pair_images(catalog: &ImageCatalog, max_distance: f64) -> Result<(Vec<ImagePair>, PairingReport)> {
    if !(max_distance >= 0.0) {
        return Err(Error::Invalid(format!("max_distance {max_distance} must be >= 0")));
    }
    let mut report = PairingReport {
        max_distance,
        ..Default::default()
    };
    let finite = |img: &StreetViewImage| img.latitude.is_finite() && img.longitude.is_finite();
    let mut pres = Vec::new();
    let mut posts = Vec::new();
    for img in catalog.images() {
        if !finite(img) {
            log::warn!("image {} has non-finite coordinates; skipped", img.image_id);
            report.invalid.push(img.image_id.clone());
            continue;
        }
        match img.phase {
            Phase::Pre => pres.push(img),
            Phase::Post => posts.push(img),
        }
    }
    if pres.is_empty() || posts.is_empty() {
        return Err(Error::Invalid(format!(
            "pairing needs both phases; have {} pre and {} post images",
            pres.len(),
            posts.len()
        )));
    }
    let index = LatitudeIndex::new(pres);
    let mut pairs = Vec::new();
    let mut users: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for post in posts {
        let (pre, d) = index.nearest(post.location());
        if d <= max_distance {
            users.entry(pre.image_id.clone()).or_default().push(post.image_id.clone());
            pairs.push(ImagePair {
                pair_id: ImagePair::id_for(&post.image_id),
                pre_id: pre.image_id.clone(),
                post_id: post.image_id.clone(),
                pairing_distance: d,
            });
        } else {
            report.discarded.push(Discard {
                post_id: post.image_id.clone(),
                nearest_pre: pre.image_id.clone(),
                distance: d,
            });
        }
    }
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    report.discarded.sort_by(|a, b| a.post_id.cmp(&b.post_id));
    report.shared = users
        .into_iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|(k, mut v)| {
            v.sort();
            (k, v)
        })
        .collect();
    Ok((pairs, report))
}

pub fn write_pairs<W: Write>(mut w: W, pairs: &[ImagePair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io("<pairs>", e))?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<ImagePair>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<pairs>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Utc;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn image(id: &str, phase: Phase, lat: f64, lon: f64) -> StreetViewImage {
        StreetViewImage {
            image_id: id.into(),
            phase,
            latitude: lat,
            longitude: lon,
            captured_at: Utc::now(),
            uri: format!("{id}.png"),
        }
    }

    #[test]
    fn identical_coordinates_pair_at_zero() {
        let (cat, _) = ImageCatalog::from_images([
            image("a", Phase::Pre, 29.4, -83.3),
            image("b", Phase::Post, 29.4, -83.3),
        ]);
        let (pairs, report) = pair_images(&cat, 10.0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].pairing_distance, 0.0);
        assert!(report.discarded.is_empty());
    }

    #[test]
    fn distant_post_is_discarded() {
        // 500 m north is about 0.0044966 degrees of latitude.
        let (cat, _) = ImageCatalog::from_images([
            image("a", Phase::Pre, 0.0, 0.0),
            image("b", Phase::Post, 500.0 / 111_194.9, 0.0),
        ]);
        let (pairs, report) = pair_images(&cat, 10.0).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(report.discarded.len(), 1);
        assert!((report.discarded[0].distance - 500.0).abs() < 0.01);
        assert!(report.render(0).contains("discard b nearest a"));
    }

    #[test]
    fn ties_prefer_lowest_id_and_sharing_is_reported() {
        let (cat, _) = ImageCatalog::from_images([
            image("z", Phase::Pre, 0.0, 0.0001),
            image("m", Phase::Pre, 0.0, -0.0001),
            image("p1", Phase::Post, 0.0, 0.0),
            image("p2", Phase::Post, 0.0, 0.0),
        ]);
        let (pairs, report) = pair_images(&cat, 100.0).unwrap();
        assert!(pairs.iter().all(|p| p.pre_id == "m"));
        assert_eq!(report.shared["m"], ["p1", "p2"]);
    }

    #[test]
    fn empty_phase_is_an_error() {
        let (cat, _) = ImageCatalog::from_images([image("a", Phase::Pre, 0.0, 0.0)]);
        assert!(pair_images(&cat, 10.0).is_err());
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = rng.random_range(1..60);
            let mut imgs = Vec::new();
            for i in 0..n {
                let phase = if i % 2 == 0 { Phase::Pre } else { Phase::Post };
                imgs.push(image(
                    &format!("i{i:03}"),
                    phase,
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                ));
            }
            imgs.push(image("last", Phase::Post, 0.0, 0.0));
            let (cat, _) = ImageCatalog::from_images(imgs);
            let (pairs, _) = pair_images(&cat, 300.0).unwrap();
            for post in cat.phase(Phase::Post) {
                let best = cat
                    .phase(Phase::Pre)
                    .map(|p| (haversine_distance(p.location(), post.location()), &p.image_id))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
                    .unwrap();
                let got = pairs.iter().find(|p| p.post_id == post.image_id);
                if best.0 <= 300.0 {
                    assert_eq!(&got.unwrap().pre_id, best.1);
                } else {
                    assert!(got.is_none());
                }
            }
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let pairs = vec![ImagePair {
            pair_id: "pair-b".into(),
            pre_id: "a".into(),
            post_id: "b".into(),
            pairing_distance: 1.25,
        }];
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        assert_eq!(read_pairs(buf.as_slice()).unwrap(), pairs);
    }
}
