//! Geolocated image manifests, pre/post pairing and stratified splits.
//!
//! Manifest format: UTF-8 CSV with header
//! `image_id,phase,latitude,longitude,captured_at,uri`, where `phase` is `pre`
//! or `post` and `captured_at` is an ISO-8601 timestamp.

pub mod geo;
pub mod pairing;
pub mod split;

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use geo::{haversine_distance, GeoPoint, EARTH_RADIUS_METERS};
pub use pairing::{pair_images, read_pairs, write_pairs, ImagePair, PairingReport};
pub use split::{split_dataset, DatasetSplit};

pub const MANIFEST_HEADER: [&str; 6] = ["image_id", "phase", "latitude", "longitude", "captured_at", "uri"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pre => "pre",
            Phase::Post => "post",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(Phase::Pre),
            "post" => Ok(Phase::Post),
            other => Err(Error::Invalid(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreetViewImage {
    pub image_id: String,
    pub phase: Phase,
    pub latitude: f64,
    pub longitude: f64,
    pub captured_at: DateTime<Utc>,
    pub uri: String,
}

impl StreetViewImage {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.latitude, self.longitude)
    }
}

/// A manifest row that failed validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RowRejection {
    /// 1-based line number in the manifest, counting the header.
    pub line: usize,
    pub image_id: Option<String>,
    pub reason: String,
}

impl fmt::Display for RowRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.image_id {
            Some(id) => write!(f, "line {} ({id}): {}", self.line, self.reason),
            None => write!(f, "line {}: {}", self.line, self.reason),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageCatalog {
    images: Vec<StreetViewImage>,
}

impl ImageCatalog {
    /// Build a catalog, rejecting invalid or duplicate entries.
    pub fn from_images(images: impl IntoIterator<Item = StreetViewImage>) -> (Self, Vec<RowRejection>) {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut rejected = Vec::new();
        for (i, img) in images.into_iter().enumerate() {
            match validate(&img, &seen) {
                Ok(()) => {
                    seen.insert(img.image_id.clone());
                    kept.push(img);
                }
                Err(reason) => rejected.push(RowRejection {
                    line: i + 2,
                    image_id: Some(img.image_id.clone()),
                    reason,
                }),
            }
        }
        (Self { images: kept }, rejected)
    }

    pub fn images(&self) -> &[StreetViewImage] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&StreetViewImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &StreetViewImage> {
        self.images.iter().filter(move |i| i.phase == phase)
    }

    /// `(pre, post)` image counts.
    pub fn counts(&self) -> (usize, usize) {
        let pre = self.phase(Phase::Pre).count();
        (pre, self.images.len() - pre)
    }
}

fn validate(img: &StreetViewImage, seen: &HashSet<String>) -> std::result::Result<(), String> {
    if img.image_id.trim().is_empty() {
        return Err("missing image_id".into());
    }
    if seen.contains(&img.image_id) {
        return Err(format!("duplicate image_id `{}`", img.image_id));
    }
    if !(-90.0..=90.0).contains(&img.latitude) {
        return Err(format!("latitude {} outside [-90, 90]", img.latitude));
    }
    if !(-180.0..=180.0).contains(&img.longitude) {
        return Err(format!("longitude {} outside [-180, 180]", img.longitude));
    }
    Ok(())
}

/// Parse an ISO-8601 timestamp; naive values are taken as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc());
    }
    Err(format!("unparseable timestamp `{s}`"))
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<StreetViewImage, (Option<String>, String)> {
    let field = |i: usize| record.get(i).unwrap_or("").trim();
    let id = field(0).to_string();
    let idopt = (!id.is_empty()).then(|| id.clone());
    if record.len() != MANIFEST_HEADER.len() {
        return Err((idopt, format!("expected {} fields, found {}", MANIFEST_HEADER.len(), record.len())));
    }
    let phase = Phase::from_str(field(1)).map_err(|e| (idopt.clone(), e.to_string()))?;
    let lat = field(2)
        .parse::<f64>()
        .map_err(|_| (idopt.clone(), format!("bad latitude `{}`", field(2))))?;
    let lon = field(3)
        .parse::<f64>()
        .map_err(|_| (idopt.clone(), format!("bad longitude `{}`", field(3))))?;
    let captured_at = parse_timestamp(field(4)).map_err(|e| (idopt.clone(), e))?;
    Ok(StreetViewImage {
        image_id: id,
        phase,
        latitude: lat,
        longitude: lon,
        captured_at,
        uri: field(5).to_string(),
    })
}

/// Read a manifest; invalid rows are returned as rejections rather than errors.
pub fn read_catalog<R: Read>(reader: R) -> Result<(ImageCatalog, Vec<RowRejection>)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::Invalid(format!(
            "manifest header {header:?} does not match {MANIFEST_HEADER:?}"
        )));
    }
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        match rec {
            Ok(rec) => match parse_row(&rec) {
                Ok(img) => rows.push((line, img)),
                Err((image_id, reason)) => rejected.push(RowRejection { line, image_id, reason }),
            },
            Err(e) => rejected.push(RowRejection {
                line,
                image_id: None,
                reason: e.to_string(),
            }),
        }
    }
    let lines: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
    let (catalog, mut invalid) = ImageCatalog::from_images(rows.into_iter().map(|(_, img)| img));
    for r in &mut invalid {
        r.line = lines[r.line - 2];
    }
    rejected.extend(invalid);
    rejected.sort_by_key(|r| r.line);
    Ok((catalog, rejected))
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<(ImageCatalog, Vec<RowRejection>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (catalog, rejected) = read_catalog(file)?;
    let (pre, post) = catalog.counts();
    log::info!(
        "loaded {} images from {} ({pre} pre, {post} post, {} rejected)",
        catalog.len(),
        path.display(),
        rejected.len()
    );
    for r in &rejected {
        log::warn!("{}: rejected {r}", path.display());
    }
    Ok((catalog, rejected))
}

pub fn write_catalog<W: Write>(writer: W, images: &[StreetViewImage]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for img in images {
        w.write_record([
            img.image_id.as_str(),
            &img.phase.to_string(),
            &img.latitude.to_string(),
            &img.longitude.to_string(),
            &img.captured_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            &img.uri,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = "image_id,phase,latitude,longitude,captured_at,uri
a,pre,29.4,-83.3,2023-08-29T10:00:00Z,img/a.jpg
b,post,29.4,-83.3,2024-10-17T10:00:00Z,img/b.jpg
c,post,29.5,-83.3,2024-10-17 11:00:00,img/c.jpg
";

    #[test]
    fn loads_valid_rows() {
        let (cat, rejected) = read_catalog(MANIFEST.as_bytes()).unwrap();
        assert_eq!(cat.len(), 3);
        assert!(rejected.is_empty());
        assert_eq!(cat.counts(), (1, 2));
        assert_eq!(cat.get("c").unwrap().captured_at.to_rfc3339(), "2024-10-17T11:00:00+00:00");
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        let text = format!(
            "{MANIFEST}d,post,95.0,0,2024-10-17,x\nb,pre,0,0,2024-10-17,y\ne,post,NaN,0,2024-10-17,z\nf,sideways,0,0,2024-10-17,w\n"
        );
        let (cat, rejected) = read_catalog(text.as_bytes()).unwrap();
        assert_eq!(cat.len(), 3);
        let lines: Vec<usize> = rejected.iter().map(|r| r.line).collect();
        assert_eq!(lines, [5, 6, 7, 8]);
        assert!(rejected[0].reason.contains("latitude"));
        assert!(rejected[1].reason.contains("duplicate"));
    }

    #[test]
    fn bad_header_is_fatal() {
        assert!(read_catalog("id,lat\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn write_then_read_roundtrip() {
        let (cat, _) = read_catalog(MANIFEST.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_catalog(&mut buf, cat.images()).unwrap();
        let (again, rejected) = read_catalog(buf.as_slice()).unwrap();
        assert!(rejected.is_empty());
        assert_eq!(again, cat);
    }
}
