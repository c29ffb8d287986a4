//! Procedural bi-temporal street scenes with known damage.
//!
//! The pre image is a street scene (sky gradient, grass verge, road band,
//! buildings on the horizon, trees). The post image renders the same layout
//! with damage scaled by `damage_budget`: collapsed buildings become low
//! rubble, trees fall across the verge, debris speckle spreads below the
//! horizon and a flood band rises over the road. Both phases also carry
//! pre-existing standing water and gravel, so the amount of water or debris
//! in a post image alone does not determine the damage class.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, PixelImage};
use crate::error::{Error, Result};
use crate::label::DamageLabel;

/// Everything needed to render one scene pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub size: usize,
    pub building_count: usize,
    pub tree_count: usize,
    pub damage_budget: f64,
    /// Debris speckle density added at full budget.
    pub debris_density: f64,
    /// Fraction of the road band flooded at full budget.
    pub flood_fraction: f64,
    /// Trees felled at full budget.
    pub felled_tree_count: usize,
    pub noise_amplitude: f64,
    /// Standing water already on the road before the event, as a band fraction.
    pub pre_water_fraction: f64,
    /// Gravel speckle density already present before the event.
    pub pre_gravel_density: f64,
    pub thresholds: (f64, f64),
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            building_count: 4,
            tree_count: 3,
            damage_budget: 0.5,
            debris_density: 0.3,
            flood_fraction: 0.5,
            felled_tree_count: 3,
            noise_amplitude: 0.03,
            pre_water_fraction: 0.0,
            pre_gravel_density: 0.0,
            thresholds: (0.2, 0.6),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.thresholds;
        let bad = |m: String| Err(Error::Invalid(m));
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("thresholds ({lo}, {hi}) must satisfy 0 < t_mild < t_severe < 1"));
        }
        if self.size < 16 {
            return bad(format!("scene size {} below 16 pixels", self.size));
        }
        if !(0.0..=1.0).contains(&self.damage_budget) {
            return bad(format!("damage_budget {} outside [0, 1]", self.damage_budget));
        }
        if !(self.flood_fraction > 0.0 && self.flood_fraction <= 1.0) {
            return bad(format!("flood_fraction {} must be in (0, 1]", self.flood_fraction));
        }
        if !(0.0..=0.5).contains(&self.pre_water_fraction) {
            return bad(format!("pre_water_fraction {} outside [0, 0.5]", self.pre_water_fraction));
        }
        for (name, v) in [
            ("debris_density", self.debris_density),
            ("pre_gravel_density", self.pre_gravel_density),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.building_count == 0 {
            return bad("building_count must be positive".into());
        }
        Ok(())
    }

    pub fn label(&self) -> DamageLabel {
        label_for_budget(self.damage_budget, self.thresholds)
    }
}

pub fn label_for_budget(budget: f64, (t_mild, t_severe): (f64, f64)) -> DamageLabel {
    if budget < t_mild {
        DamageLabel::Mild
    } else if budget >= t_severe {
        DamageLabel::Severe
    } else {
        DamageLabel::Moderate
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub pre: PixelImage,
    pub post: PixelImage,
    pub label: DamageLabel,
    pub mask: Mask,
}

const BUILDING_COLORS: [[f32; 3]; 3] = [[0.85, 0.80, 0.65], [0.90, 0.90, 0.88], [0.70, 0.35, 0.30]];
const GRASS: [f32; 3] = [0.30, 0.55, 0.25];
const ROAD: [f32; 3] = [0.45, 0.45, 0.47];
const WATER: [f32; 3] = [0.25, 0.35, 0.55];
const GRAVEL: [f32; 3] = [0.35, 0.28, 0.22];
const FOLIAGE: [f32; 3] = [0.12, 0.42, 0.15];
const BARK: [f32; 3] = [0.40, 0.26, 0.12];

struct Building {
    left: usize,
    width: usize,
    height: usize,
    color: [f32; 3],
    rubble: Vec<f32>,
}

struct Tree {
    x: usize,
    radius: usize,
}

struct Layout {
    horizon: usize,
    road: usize,
    buildings: Vec<Building>,
    trees: Vec<Tree>,
    /// Per-pixel uniform draws shared by both phases so speckle only grows.
    speckle: Vec<f64>,
}

fn draw_layout(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Layout {
    let s = spec.size;
    let horizon = (s as f64 * rng.random_range(0.40..0.50)) as usize;
    let road = (s as f64 * rng.random_range(0.70..0.78)) as usize;
    let buildings = (0..spec.building_count)
        .map(|_| {
            let width = rng.random_range(s / 10..s / 5);
            let height = rng.random_range(s / 8..s / 3);
            let left = rng.random_range(0..s - width);
            let color = BUILDING_COLORS[rng.random_range(0..BUILDING_COLORS.len())];
            let rubble_h = (height / 4).max(1);
            let rubble = (0..rubble_h * width).map(|_| rng.random_range(0.3..0.6)).collect();
            Building {
                left,
                width,
                height,
                color,
                rubble,
            }
        })
        .collect();
    let trees = (0..spec.tree_count)
        .map(|_| Tree {
            x: rng.random_range(2..s - 2),
            radius: rng.random_range((s / 16).max(1)..(s / 8).max(2)),
        })
        .collect();
    let speckle = (0..s * s).map(|_| rng.random::<f64>()).collect();
    Layout {
        horizon,
        road,
        buildings,
        trees,
        speckle,
    }
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, c: [f32; 3]) {
        if y < self.size && x < self.size {
            let o = (y * self.size + x) * 3;
            self.data[o..o + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, top: usize, left: usize, bottom: usize, right: usize, c: [f32; 3]) {
        for y in top..bottom.min(self.size) {
            for x in left..right.min(self.size) {
                self.put(y, x, c);
            }
        }
    }
}

struct Damage {
    collapsed: Vec<bool>,
    felled: Vec<bool>,
    water_rows: usize,
    debris_density: f64,
}

fn render(spec: &SyntheticSceneSpec, l: &Layout, d: &Damage, mask: Option<&mut Mask>) -> Canvas {
    let s = spec.size;
    let mut cv = Canvas {
        size: s,
        data: vec![0.0; s * s * 3],
    };
    for y in 0..l.horizon {
        let t = y as f32 / l.horizon as f32;
        cv.rect(y, 0, y + 1, s, [0.45 + 0.35 * t, 0.65 + 0.25 * t, 0.95]);
    }
    cv.rect(l.horizon, 0, l.road, s, GRASS);
    cv.rect(l.road, 0, s, s, ROAD);
    let mut local = Mask::empty(s, s);
    for (b, &down) in l.buildings.iter().zip(&d.collapsed) {
        let top = l.horizon.saturating_sub(b.height);
        if down {
            let rh = b.rubble.len() / b.width;
            for r in 0..rh {
                for c in 0..b.width {
                    let v = b.rubble[r * b.width + c] as f32;
                    cv.put(l.horizon - rh + r, b.left + c, [v, v, v]);
                }
            }
            local.fill_rect(top, b.left, l.horizon, b.left + b.width);
        } else {
            cv.rect(top, b.left, l.horizon, b.left + b.width, b.color);
            let roof = (b.height / 6).max(1);
            cv.rect(top, b.left, top + roof, b.left + b.width, b.color.map(|v| v * 0.6));
        }
    }
    for (t, &fell) in l.trees.iter().zip(&d.felled) {
        if fell {
            let y = l.road.saturating_sub(2);
            let (x0, x1) = (t.x.saturating_sub(2 * t.radius), (t.x + 2 * t.radius).min(s));
            cv.rect(y.saturating_sub(1), x0, y + 1, x1, BARK);
            for x in (x0..x1).step_by(2) {
                cv.rect(y.saturating_sub(3), x, y.saturating_sub(1), x + 1, FOLIAGE);
            }
            local.fill_rect(y.saturating_sub(3), x0, y + 1, x1);
        } else {
            let cy = l.horizon as isize - 2 * t.radius as isize;
            let r2 = (t.radius * t.radius) as isize;
            for y in 0..s as isize {
                for x in 0..s as isize {
                    let (dy, dx) = (y - cy, x - t.x as isize);
                    if dy * dy + dx * dx <= r2 {
                        cv.put(y as usize, x as usize, FOLIAGE);
                    }
                }
            }
            cv.rect(cy.max(0) as usize, t.x.saturating_sub(1), l.horizon, t.x + 1, BARK);
        }
    }
    let band = s - l.road;
    let pre_rows = (band as f64 * spec.pre_water_fraction).floor() as usize;
    cv.rect(s - d.water_rows, 0, s, s, WATER);
    if d.water_rows > pre_rows {
        local.fill_rect(s - d.water_rows, 0, s - pre_rows, s);
    }
    for y in l.horizon..s {
        for x in 0..s {
            let u = l.speckle[y * s + x];
            if u < d.debris_density {
                cv.put(y, x, GRAVEL);
                if u >= spec.pre_gravel_density {
                    local.set(y, x);
                }
            }
        }
    }
    if let Some(m) = mask {
        *m = local;
    }
    cv
}

fn add_noise(cv: &mut Canvas, amplitude: f64, rng: &mut ChaCha8Rng) {
    if amplitude > 0.0 {
        for v in &mut cv.data {
            *v += rng.random_range(-amplitude..=amplitude) as f32;
        }
    }
}

/// Render one pre/post pair from `spec`; all randomness comes from `seed`.
pub fn generate_synthetic_pair(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = draw_layout(spec, &mut rng);
    let s = spec.size;
    let band = s - layout.road;
    let budget = spec.damage_budget;

    let n_collapse = ((budget * spec.building_count as f64).round() as usize).min(spec.building_count);
    let mut order: Vec<usize> = (0..spec.building_count).collect();
    order.shuffle(&mut rng);
    let mut collapsed = vec![false; spec.building_count];
    for &i in &order[..n_collapse] {
        collapsed[i] = true;
    }
    let n_fell = ((budget * spec.felled_tree_count as f64).round() as usize).min(spec.tree_count);
    let felled: Vec<bool> = (0..spec.tree_count).map(|i| i < n_fell).collect();

    let pre_rows = (band as f64 * spec.pre_water_fraction).floor() as usize;
    let flood_rows = if budget > 0.0 {
        ((band as f64 * spec.flood_fraction * budget).ceil() as usize).clamp(1, band - pre_rows)
    } else {
        0
    };
    let pre_damage = Damage {
        collapsed: vec![false; spec.building_count],
        felled: vec![false; spec.tree_count],
        water_rows: pre_rows,
        debris_density: spec.pre_gravel_density,
    };
    let post_damage = Damage {
        collapsed,
        felled,
        water_rows: pre_rows + flood_rows,
        debris_density: (spec.pre_gravel_density + spec.debris_density * budget).min(1.0),
    };

    let mut pre = render(spec, &layout, &pre_damage, None);
    let mut mask = Mask::empty(s, s);
    let mut post = render(spec, &layout, &post_damage, Some(&mut mask));
    add_noise(&mut pre, spec.noise_amplitude, &mut rng);
    add_noise(&mut post, spec.noise_amplitude, &mut rng);
    Ok(SyntheticPair {
        pre: PixelImage::from_clipped(s, s, pre.data)?,
        post: PixelImage::from_clipped(s, s, post.data)?,
        label: spec.label(),
        mask,
    })
}

/// Distribution over scene specs used to build a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub size: usize,
    pub building_count: (usize, usize),
    pub tree_count: (usize, usize),
    /// Damage budget is drawn uniformly from this range.
    pub budget_range: (f64, f64),
    pub debris_density: f64,
    pub flood_fraction: f64,
    pub noise_amplitude: f64,
    /// Upper bounds of the uniformly drawn pre-existing water and gravel.
    pub max_pre_water_fraction: f64,
    pub max_pre_gravel_density: f64,
    pub thresholds: (f64, f64),
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            size: 64,
            building_count: (2, 5),
            tree_count: (1, 4),
            budget_range: (0.0, 1.0),
            debris_density: 0.3,
            flood_fraction: 0.5,
            noise_amplitude: 0.03,
            max_pre_water_fraction: 0.5,
            max_pre_gravel_density: 0.25,
            thresholds: (0.2, 0.6),
        }
    }
}

impl SyntheticDatasetSpec {
    /// Draw the scene spec for sample `index` of a dataset seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let (b0, b1) = self.budget_range;
        let trees = rng.random_range(self.tree_count.0..=self.tree_count.1);
        SyntheticSceneSpec {
            size: self.size,
            building_count: rng.random_range(self.building_count.0..=self.building_count.1),
            tree_count: trees,
            damage_budget: if b1 > b0 { rng.random_range(b0..b1) } else { b0 },
            debris_density: self.debris_density,
            flood_fraction: self.flood_fraction,
            felled_tree_count: trees,
            noise_amplitude: self.noise_amplitude,
            pre_water_fraction: rng.random_range(0.0..=self.max_pre_water_fraction),
            pre_gravel_density: rng.random_range(0.0..=self.max_pre_gravel_density),
            thresholds: self.thresholds,
        }
    }

    /// Seed used to render sample `index`.
    pub fn render_seed(seed: u64, index: u64) -> u64 {
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5DEE_CE66
    }

    pub fn generate(&self, seed: u64, index: u64) -> Result<(SyntheticSceneSpec, SyntheticPair)> {
        let spec = self.sample(seed, index);
        let pair = generate_synthetic_pair(&spec, Self::render_seed(seed, index))?;
        Ok((spec, pair))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_budget_without_noise_is_identity() {
        for seed in 0..20 {
            let spec = SyntheticSceneSpec {
                damage_budget: 0.0,
                noise_amplitude: 0.0,
                pre_water_fraction: 0.3,
                pre_gravel_density: 0.2,
                ..Default::default()
            };
            let p = generate_synthetic_pair(&spec, seed).unwrap();
            assert_eq!(p.pre, p.post);
            assert_eq!(p.label, DamageLabel::Mild);
            assert!(p.mask.is_empty());
        }
    }

    #[test]
    fn full_budget_is_severe_with_mask() {
        let spec = SyntheticSceneSpec {
            damage_budget: 1.0,
            ..Default::default()
        };
        let p = generate_synthetic_pair(&spec, 3).unwrap();
        assert_eq!(p.label, DamageLabel::Severe);
        assert!(p.mask.count() > 0);
        assert_ne!(p.pre, p.post);
    }

    #[test]
    fn any_positive_budget_leaves_a_mask() {
        for (i, budget) in [1e-9, 0.01, 0.19, 0.5].into_iter().enumerate() {
            let spec = SyntheticSceneSpec {
                damage_budget: budget,
                pre_water_fraction: 0.5,
                ..Default::default()
            };
            assert!(!generate_synthetic_pair(&spec, i as u64).unwrap().mask.is_empty());
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticSceneSpec::default();
        assert_eq!(generate_synthetic_pair(&spec, 7).unwrap(), generate_synthetic_pair(&spec, 7).unwrap());
        assert_ne!(generate_synthetic_pair(&spec, 7).unwrap().pre, generate_synthetic_pair(&spec, 8).unwrap().pre);
    }

    #[test]
    fn invalid_thresholds_rejected() {
        let spec = SyntheticSceneSpec {
            thresholds: (0.6, 0.2),
            ..Default::default()
        };
        assert!(generate_synthetic_pair(&spec, 0).is_err());
    }

    #[test]
    fn class_proportions_follow_threshold_measure() {
        let ds = SyntheticDatasetSpec::default();
        let mut counts = [0usize; 3];
        for i in 0..1000 {
            counts[ds.sample(42, i).label().index()] += 1;
        }
        let (t0, t1) = ds.thresholds;
        let expect = [t0, t1 - t0, 1.0 - t1];
        for k in 0..3 {
            assert!((counts[k] as f64 / 1000.0 - expect[k]).abs() <= 0.03, "{counts:?}");
        }
    }
}
