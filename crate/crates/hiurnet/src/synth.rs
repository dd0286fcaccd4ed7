//! Seeded generator of synthetic hierarchical worlds with a known
//! flow-generating process, for end-to-end tests without proprietary data.
//!
//! Cities tile the unit square; each city is a `grid_side x grid_side` lattice
//! of mesh grids carrying 43 indicators in the four standard categories
//! (roads, POIs, population, railway). Grid-to-grid volumes follow an
//! emission/attraction product with exponential distance decay and
//! multiplicative log-normal noise; inter-level volumes are exact sums of
//! their member-grid constituents, so aggregation consistency holds by
//! construction.
//!
//! Under the default process, attractiveness is a road/POI interaction rather
//! than population, so a population-and-distance-only model cannot fully
//! explain the flows. The pure-gravity process generates flows from population
//! and distance alone, which that model family can recover.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::graph::{FlowRecord, InclusionMap, IndicatorTable, UnitId};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 43;
pub const ROAD_FEATURES: usize = 24;
pub const POI_FEATURES: usize = 17;

const VOLUME_SCALE: f64 = 400.0;
const DISTANCE_DECAY: f64 = 0.55;
const MIX_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowProcess {
    /// Flows driven by a road/POI interaction attractiveness (default).
    FeatureInteraction,
    /// Flows driven purely by population products and distance decay.
    PureGravity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_cities: usize,
    pub grid_side: usize,
    /// Fraction of ordered grid pairs that receive a nonzero flow.
    pub flow_density: f64,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_sd: f64,
    pub seed: u64,
    pub process: FlowProcess,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_cities: 8,
            grid_side: 7,
            flow_density: 0.05,
            noise_sd: 0.1,
            seed: 0,
            process: FlowProcess::FeatureInteraction,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.n_cities < 2 {
            return Err(crate::error::Error::InvalidConfig(
                "n_cities must be >= 2".into(),
            ));
        }
        if self.grid_side < 2 {
            return Err(crate::error::Error::InvalidConfig(
                "grid_side must be >= 2".into(),
            ));
        }
        if !(self.flow_density > 0.0 && self.flow_density <= 1.0) {
            return Err(crate::error::Error::InvalidConfig(
                "flow_density must be in (0, 1]".into(),
            ));
        }
        if self.noise_sd < 0.0 {
            return Err(crate::error::Error::InvalidConfig(
                "noise_sd must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn grids_per_city(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn n_grids(&self) -> usize {
        self.n_cities * self.grids_per_city()
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub indicators: IndicatorTable,
    pub inclusion: InclusionMap,
    pub flows: Vec<FlowRecord>,
    pub coords: Vec<[f64; 2]>,
    /// Audit record of the generating process.
    pub manifest: serde_json::Value,
}

pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_DIM);
    for i in 0..ROAD_FEATURES {
        names.push(format!("road_{i}"));
    }
    for i in 0..POI_FEATURES {
        names.push(format!("poi_{i}"));
    }
    names.push("population".into());
    names.push("railway_users".into());
    names
}

/// City layout: the most square factorization of `n` cells covering it, by
/// columns then rows.
fn city_layout(n: usize) -> (usize, usize) {
    let mut cols = (n as f64).sqrt().ceil() as usize;
    while cols < n && !n.is_multiple_of(cols) {
        cols += 1;
    }
    let rows = n.div_ceil(cols);
    (cols, rows)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    // Knuth's method; lambdas here stay small.
    let l = (-lambda).exp();
    let mut k = 0u64;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Generate a world. Fully deterministic per seed; the returned manifest
/// records every process parameter.
pub fn generate_world(config: &WorldConfig) -> crate::error::Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_cities = config.n_cities;
    let side = config.grid_side;
    let per_city = config.grids_per_city();
    let n_grids = config.n_grids();
    let (cols, rows) = city_layout(n_cities);
    let cell_w = 1.0 / cols as f64;
    let cell_h = 1.0 / rows as f64;

    // Coordinates and inclusion.
    let mut coords = Vec::with_capacity(n_grids);
    let mut pairs = Vec::with_capacity(n_grids);
    for city in 0..n_cities {
        let cx = (city % cols) as f64 * cell_w;
        let cy = (city / cols) as f64 * cell_h;
        for g in 0..per_city {
            let gx = (g % side) as f64 + 0.5;
            let gy = (g / side) as f64 + 0.5;
            coords.push([
                cx + gx * cell_w / side as f64,
                cy + gy * cell_h / side as f64,
            ]);
            pairs.push((UnitId::city(city), UnitId::mesh(city * per_city + g)));
        }
    }

    // Per-city intensity levels, then per-grid indicators with an urban-core
    // falloff toward the city cell border.
    let city_levels: Vec<[f64; 3]> = (0..n_cities)
        .map(|_| {
            [
                rng.random_range(0.5..2.0),
                rng.random_range(0.3..2.0),
                rng.random_range(0.5..2.0),
            ]
        })
        .collect();
    let mut values = vec![0.0f64; n_grids * FEATURE_DIM];
    for grid in 0..n_grids {
        let city = grid / per_city;
        let [road_level, poi_level, pop_level] = city_levels[city];
        let g = grid % per_city;
        let gx = (g % side) as f64 + 0.5;
        let gy = (g / side) as f64 + 0.5;
        let center = side as f64 / 2.0;
        let dist_core = (((gx - center).powi(2) + (gy - center).powi(2)).sqrt())
            / (center * std::f64::consts::SQRT_2);
        let core = (-1.5 * dist_core).exp();
        let row = &mut values[grid * FEATURE_DIM..(grid + 1) * FEATURE_DIM];
        for (j, v) in row.iter_mut().take(ROAD_FEATURES).enumerate() {
            *v = poisson(&mut rng, road_level * core * (1.0 + (j % 3) as f64)) as f64;
        }
        for (j, v) in row[ROAD_FEATURES..ROAD_FEATURES + POI_FEATURES]
            .iter_mut()
            .enumerate()
        {
            *v = poisson(&mut rng, poi_level * core * (0.5 + (j % 4) as f64)) as f64;
        }
        row[FEATURE_DIM - 2] = (200.0 * pop_level * core * (0.4 * normal(&mut rng)).exp()).max(0.0);
        row[FEATURE_DIM - 1] = if rng.random::<f64>() < 0.15 {
            (poisson(&mut rng, 8.0) * 50) as f64 * core
        } else {
            0.0
        };
    }
    let names = feature_names();
    let indicators =
        IndicatorTable::new(names.clone(), Tensor::matrix(n_grids, FEATURE_DIM, values));

    // Latent per-grid emission and attraction.
    let road_subset: Vec<usize> = sample_indices(&mut rng, ROAD_FEATURES, MIX_FEATURES);
    let poi_subset: Vec<usize> = sample_indices(&mut rng, POI_FEATURES, MIX_FEATURES)
        .iter()
        .map(|j| j + ROAD_FEATURES)
        .collect();
    let road_weights: Vec<f64> = (0..MIX_FEATURES)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();
    let poi_weights: Vec<f64> = (0..MIX_FEATURES)
        .map(|_| rng.random_range(0.5..1.5))
        .collect();

    let mix = |subset: &[usize], weights: &[f64]| -> Vec<f64> {
        (0..n_grids)
            .map(|g| {
                subset
                    .iter()
                    .zip(weights)
                    .map(|(&j, w)| w * indicators.values.row(g)[j])
                    .sum()
            })
            .collect()
    };
    let road_mix = min_max_normalize(&mix(&road_subset, &road_weights));
    let poi_mix = min_max_normalize(&mix(&poi_subset, &poi_weights));
    let pop_norm = min_max_normalize(
        &(0..n_grids)
            .map(|g| indicators.values.row(g)[FEATURE_DIM - 2])
            .collect::<Vec<_>>(),
    );

    let (emission, attraction): (Vec<f64>, Vec<f64>) = match config.process {
        FlowProcess::FeatureInteraction => (
            (0..n_grids)
                .map(|g| 0.05 + pop_norm[g] * road_mix[g])
                .collect(),
            (0..n_grids)
                .map(|g| 0.05 + road_mix[g] * poi_mix[g])
                .collect(),
        ),
        FlowProcess::PureGravity => (
            (0..n_grids).map(|g| 0.05 + pop_norm[g]).collect(),
            (0..n_grids).map(|g| 0.05 + pop_norm[g]).collect(),
        ),
    };

    // Sample observed grid pairs blockwise: for each ordered (origin grid,
    // destination city) block, a near-constant number of destinations drawn
    // without replacement, weighted by attractiveness. Heavy pairs are the
    // observed ones, matching how commuting records surface, and the expected
    // overall pair fraction equals `flow_density`.
    let expected_per_block = config.flow_density * per_city as f64;
    let mut m2m = Vec::new();
    for origin in 0..n_grids {
        for city in 0..n_cities {
            let members: Vec<usize> = (city * per_city..(city + 1) * per_city)
                .filter(|&m| m != origin)
                .collect();
            let frac = expected_per_block.fract();
            let mut count = expected_per_block.floor() as usize;
            if rng.random::<f64>() < frac {
                count += 1;
            }
            let count = count.min(members.len());
            if count == 0 {
                continue;
            }
            // Efraimidis-Spirakis keys for weighted sampling without replacement.
            let mut keyed: Vec<(f64, usize)> = members
                .iter()
                .map(|&m| {
                    let u: f64 = rng.random::<f64>().max(1e-12);
                    (u.powf(1.0 / attraction[m].max(1e-9)), m)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for &(_, dest) in keyed.iter().take(count) {
                let d = ((coords[origin][0] - coords[dest][0]).powi(2)
                    + (coords[origin][1] - coords[dest][1]).powi(2))
                .sqrt();
                let noise = if config.noise_sd > 0.0 {
                    (config.noise_sd * normal(&mut rng)).exp()
                } else {
                    1.0
                };
                let volume = VOLUME_SCALE
                    * emission[origin]
                    * attraction[dest]
                    * (-d / DISTANCE_DECAY).exp()
                    * noise;
                m2m.push(FlowRecord::new(
                    UnitId::mesh(origin),
                    UnitId::mesh(dest),
                    volume,
                )?);
            }
        }
    }
    m2m.sort_by_key(|a| a.key());

    // Inter-level records: exact sums of member-grid flows, external pairs only.
    let city_of = |g: usize| g / per_city;
    let mut m2c: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    let mut c2m: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for r in &m2m {
        let (o, d) = (r.origin.index, r.destination.index);
        if city_of(o) != city_of(d) {
            *m2c.entry((o, city_of(d))).or_default() += r.volume;
            *c2m.entry((city_of(o), d)).or_default() += r.volume;
        }
    }

    let mut flows = m2m;
    for ((o, c), volume) in m2c {
        flows.push(FlowRecord::new(UnitId::mesh(o), UnitId::city(c), volume)?);
    }
    for ((c, d), volume) in c2m {
        flows.push(FlowRecord::new(UnitId::city(c), UnitId::mesh(d), volume)?);
    }

    let manifest = json!({
        "config": config,
        "layout": { "cols": cols, "rows": rows },
        "volume_scale": VOLUME_SCALE,
        "distance_decay": DISTANCE_DECAY,
        "road_subset": road_subset,
        "poi_subset": poi_subset,
        "road_weights": road_weights,
        "poi_weights": poi_weights,
    });

    Ok(World {
        indicators,
        inclusion: InclusionMap::new(pairs),
        flows,
        coords,
        manifest,
    })
}

/// `k` distinct indices from `0..n` via partial Fisher-Yates, ascending.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{FlowKind, UnitKind};

    #[test]
    fn default_world_shape() {
        let world = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(world.indicators.grid_count(), 392);
        assert_eq!(world.inclusion.city_count(), 8);
        assert_eq!(world.indicators.feature_count(), 43);
        assert!(
            world.inclusion.city_of_grid(392).is_ok(),
            "inclusion is a partition"
        );
    }

    #[test]
    fn same_seed_identical_world() {
        let config = WorldConfig {
            n_cities: 4,
            grid_side: 4,
            ..WorldConfig::default()
        };
        let a = generate_world(&config).unwrap();
        let b = generate_world(&config).unwrap();
        assert_eq!(a.indicators.values, b.indicators.values);
        assert_eq!(a.flows, b.flows);
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn different_seeds_differ() {
        let config = WorldConfig {
            n_cities: 4,
            grid_side: 4,
            ..WorldConfig::default()
        };
        let a = generate_world(&config).unwrap();
        let b = generate_world(&WorldConfig { seed: 1, ..config }).unwrap();
        assert_ne!(a.flows, b.flows);
    }

    #[test]
    fn inter_level_volumes_are_exact_member_sums() {
        let world = generate_world(&WorldConfig {
            n_cities: 4,
            grid_side: 3,
            flow_density: 0.2,
            ..WorldConfig::default()
        })
        .unwrap();
        let per_city = 9;
        for record in world.flows.iter().filter(|r| r.kind() == FlowKind::M2C) {
            let g = record.origin.index;
            let c = record.destination.index;
            let sum: f64 = world
                .flows
                .iter()
                .filter(|r| {
                    r.kind() == FlowKind::M2M
                        && r.origin.index == g
                        && r.destination.index / per_city == c
                })
                .map(|r| r.volume)
                .sum();
            assert!(
                (record.volume - sum).abs() < 1e-9,
                "m2c {g}->{c}: {} vs {}",
                record.volume,
                sum
            );
        }
        for record in world.flows.iter().filter(|r| r.kind() == FlowKind::C2M) {
            let c = record.origin.index;
            let d = record.destination.index;
            let sum: f64 = world
                .flows
                .iter()
                .filter(|r| {
                    r.kind() == FlowKind::M2M
                        && r.origin.index / per_city == c
                        && r.destination.index == d
                })
                .map(|r| r.volume)
                .sum();
            assert!((record.volume - sum).abs() < 1e-9);
        }
    }

    #[test]
    fn volume_distribution_is_right_skewed() {
        let world = generate_world(&WorldConfig::default()).unwrap();
        let volumes: Vec<f64> = world
            .flows
            .iter()
            .filter(|r| r.kind() == FlowKind::M2M)
            .map(|r| r.volume)
            .collect();
        let n = volumes.len() as f64;
        let mean = volumes.iter().sum::<f64>() / n;
        let m2 = volumes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m3 = volumes.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let skewness = m3 / m2.powf(1.5);
        assert!(skewness > 1.0, "sample skewness {skewness}");
    }

    #[test]
    fn all_volumes_non_negative_and_kinds_consistent() {
        let world = generate_world(&WorldConfig {
            n_cities: 3,
            grid_side: 3,
            flow_density: 0.3,
            ..WorldConfig::default()
        })
        .unwrap();
        for r in &world.flows {
            assert!(r.volume >= 0.0);
            match r.kind() {
                FlowKind::M2M => {
                    assert_eq!(r.origin.kind, UnitKind::Mesh);
                    assert_eq!(r.destination.kind, UnitKind::Mesh);
                }
                FlowKind::M2C => assert_eq!(r.destination.kind, UnitKind::City),
                FlowKind::C2M => assert_eq!(r.origin.kind, UnitKind::City),
            }
        }
    }

    #[test]
    fn layout_factorizations() {
        assert_eq!(city_layout(8), (4, 2));
        assert_eq!(city_layout(9), (3, 3));
        assert_eq!(city_layout(4), (2, 2));
        let (c, r) = city_layout(7);
        assert!(c * r >= 7);
    }
}
