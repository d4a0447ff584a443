//! Deterministic synthetic river valleys and their steady-state flood levels.
//!
//! The terrain is a meandering channel running from the left to the right
//! border, cut into a parabolic valley with a downstream slope and a value
//! noise perturbation that vanishes at the channel. The water surface in
//! every column sits `stage(q) = k * q^e` above that column's channel bed
//! and is flat across the column; cells below it that connect to the
//! channel through other such cells are flooded.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const NODATA: f32 = -9999.0;
pub const MIN_SIDE: usize = 64;

/// Shape parameters of a generated valley.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainPreset {
    pub name: String,
    pub base_elevation: f64,
    /// Bed drop per column, m.
    pub slope: f64,
    /// Valley wall rise, m per squared cell of cross-valley distance.
    pub valley_curvature: f64,
    /// Channel depth below the valley floor, m.
    pub incision: f64,
    /// Meander amplitude as a fraction of the row count.
    pub meander_amplitude: f64,
    /// Number of meander half-waves across the domain.
    pub meander_halfwaves: f64,
    pub noise_amplitude: f64,
    pub noise_period: usize,
    pub noise_octaves: usize,
    /// Cross-valley distance over which the noise ramps up from zero.
    pub noise_ramp: f64,
    pub rating_exponent: f64,
    /// Fraction of cells flooded at the largest calibrated discharge.
    pub flooded_fraction: f64,
}

impl TerrainPreset {
    pub fn source() -> Self {
        Self {
            name: "source".into(),
            base_elevation: 183.0,
            slope: 0.01,
            valley_curvature: 0.0025,
            incision: 1.5,
            meander_amplitude: 0.12,
            meander_halfwaves: 3.0,
            noise_amplitude: 3.0,
            noise_period: 64,
            noise_octaves: 4,
            noise_ramp: 12.0,
            rating_exponent: 0.6,
            flooded_fraction: 0.25,
        }
    }

    /// A narrower, steeper, more sinuous valley used as the unseen domain.
    pub fn foreign() -> Self {
        Self {
            name: "foreign".into(),
            base_elevation: 240.0,
            slope: 0.02,
            valley_curvature: 0.006,
            incision: 2.0,
            meander_amplitude: 0.18,
            meander_halfwaves: 5.0,
            noise_amplitude: 2.0,
            noise_period: 32,
            noise_octaves: 4,
            noise_ramp: 8.0,
            rating_exponent: 0.6,
            flooded_fraction: 0.2,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "foreign" => Ok(Self::foreign()),
            other => Err(Error::Config(format!("unknown terrain preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub k: f64,
    pub e: f64,
}

impl Rating {
    pub fn stage(&self, q: f64) -> f64 {
        self.k * q.powf(self.e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomain {
    pub seed: u64,
    pub preset: TerrainPreset,
    pub dem: Raster,
    /// 4-connected path from the left border to the right border.
    pub channel_cells: Vec<(usize, usize)>,
    /// Channel bed elevation per column.
    pub bed: Vec<f64>,
    pub rating: Rating,
}

/// Smooth value noise in [0, 1]: bilinearly interpolated (smoothstep) random
/// lattices, halving period and amplitude per octave.
pub fn value_noise(rng: &mut impl Rng, rows: usize, cols: usize, period: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut period = period.max(1);
    for _ in 0..octaves.max(1) {
        let lr = rows / period + 2;
        let lc = cols / period + 2;
        let lattice: Vec<f64> = (0..lr * lc).map(|_| rng.random()).collect();
        for r in 0..rows {
            let fy = r as f64 / period as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for c in 0..cols {
                let fx = c as f64 / period as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |y: usize, x: usize| lattice[y * lc + x];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[r * cols + c] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
        period = (period / 2).max(1);
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Row of the channel centre in every column, kept inside the border margin.
fn centerline(rng: &mut impl Rng, rows: usize, cols: usize, preset: &TerrainPreset) -> Vec<usize> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = rng.random_range(-0.05..0.05) * rows as f64;
    let wobble = value_noise(rng, 1, cols, (cols / 4).max(1), 2);
    let amp = preset.meander_amplitude * rows as f64;
    let margin = 4.0;
    (0..cols)
        .map(|c| {
            let t = c as f64 / cols as f64;
            let y = rows as f64 / 2.0
                + offset
                + amp * (std::f64::consts::PI * preset.meander_halfwaves * t + phase).sin()
                + 0.3 * amp * (wobble[c] - 0.5);
            y.round().clamp(margin, rows as f64 - 1.0 - margin) as usize
        })
        .collect()
}

/// Per-column vertical run [lo, hi] of channel cells joining consecutive centres.
fn channel_runs(center: &[usize]) -> Vec<(usize, usize)> {
    center
        .iter()
        .enumerate()
        .map(|(c, &y)| {
            if c == 0 {
                (y, y)
            } else {
                let prev = center[c - 1];
                (prev.min(y), prev.max(y))
            }
        })
        .collect()
}

pub fn gen_terrain(seed: u64, rows: usize, cols: usize) -> Result<SyntheticDomain> {
    gen_terrain_with(seed, rows, cols, &TerrainPreset::source())
}

pub fn gen_terrain_with(seed: u64, rows: usize, cols: usize, preset: &TerrainPreset) -> Result<SyntheticDomain> {
    if rows < MIN_SIDE || cols < MIN_SIDE {
        return Err(Error::Config(format!(
            "synthetic domain must be at least {MIN_SIDE}x{MIN_SIDE}, got {rows}x{cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = centerline(&mut rng, rows, cols, preset);
    let runs = channel_runs(&center);
    let noise = value_noise(&mut rng, rows, cols, preset.noise_period, preset.noise_octaves);

    let floor: Vec<f64> = (0..cols)
        .map(|c| preset.base_elevation + preset.slope * (cols - 1 - c) as f64)
        .collect();
    // rounded through f32 so channel cells sit exactly on the stored bed
    let bed: Vec<f64> = floor.iter().map(|f| (f - preset.incision) as f32 as f64).collect();
    let mut values = vec![0.0f32; rows * cols];
    let mut channel_cells = Vec::new();
    for c in 0..cols {
        let (lo, hi) = runs[c];
        // walk from the previous column's centre to this one's
        let downward = c == 0 || center[c - 1] <= center[c];
        let order: Vec<usize> = if downward { (lo..=hi).collect() } else { (lo..=hi).rev().collect() };
        channel_cells.extend(order.into_iter().map(|r| (r, c)));
        for r in 0..rows {
            let d = if r < lo {
                (lo - r) as f64
            } else if r > hi {
                (r - hi) as f64
            } else {
                0.0
            };
            let z = if d == 0.0 {
                bed[c]
            } else {
                let ramp = (d / preset.noise_ramp).min(1.0);
                floor[c] + preset.valley_curvature * d * d + preset.noise_amplitude * ramp * noise[r * cols + c]
            };
            values[r * cols + c] = z as f32;
        }
    }
    let dem = Raster::new(rows, cols, 1.0, NODATA, values)?;
    Ok(SyntheticDomain {
        seed,
        preset: preset.clone(),
        dem,
        channel_cells,
        bed,
        rating: Rating {
            k: 1.0,
            e: preset.rating_exponent,
        },
    })
}

impl SyntheticDomain {
    pub fn rows(&self) -> usize {
        self.dem.rows()
    }

    pub fn cols(&self) -> usize {
        self.dem.cols()
    }

    /// Flooded cells for a given stage above the bed.
    pub fn flooded_for_stage(&self, stage: f64) -> Vec<bool> {
        let (rows, cols) = (self.rows(), self.cols());
        let z = self.dem.values();
        let below = |r: usize, c: usize| (z[r * cols + c] as f64) < self.bed[c] + stage;
        let mut flooded = vec![false; rows * cols];
        let mut queue = VecDeque::new();
        for &(r, c) in &self.channel_cells {
            if below(r, c) && !flooded[r * cols + c] {
                flooded[r * cols + c] = true;
                queue.push_back((r, c));
            }
        }
        while let Some((r, c)) = queue.pop_front() {
            let mut visit = |nr: usize, nc: usize| {
                if !flooded[nr * cols + nc] && below(nr, nc) {
                    flooded[nr * cols + nc] = true;
                    queue.push_back((nr, nc));
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < rows {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < cols {
                visit(r, c + 1);
            }
        }
        flooded
    }

    /// Chooses `k` so that `q_max` floods the preset's target fraction.
    pub fn calibrate_rating(&mut self, q_max: f64) -> Result<()> {
        if !(q_max > 0.0) {
            return Err(Error::Config(format!("calibration discharge must be positive, got {q_max}")));
        }
        let goal = self.preset.flooded_fraction;
        let n = (self.rows() * self.cols()) as f64;
        let frac = |s: f64| self.flooded_for_stage(s).iter().filter(|&&f| f).count() as f64 / n;
        let (mut lo, mut hi) = (0.0, 1.0);
        while frac(hi) < goal {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::Config("cannot reach the target flooded fraction".into()));
            }
        }
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if frac(mid) < goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.rating.k = hi / q_max.powf(self.rating.e);
        Ok(())
    }

    /// Water level above terrain, NODATA where dry.
    pub fn simulate_water_level(&self, q: f64) -> Result<Raster> {
        if !(q > 0.0) {
            return Err(Error::Config(format!("discharge must be positive, got {q}")));
        }
        let stage = self.rating.stage(q);
        let flooded = self.flooded_for_stage(stage);
        let cols = self.cols();
        let values = self
            .dem
            .values()
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                if flooded[i] {
                    (self.bed[i % cols] + stage - z as f64) as f32
                } else {
                    NODATA
                }
            })
            .collect();
        self.dem.with_values(values)
    }
}

/// Builds and calibrates a domain in one step.
pub fn build_domain(seed: u64, rows: usize, cols: usize, preset: &TerrainPreset, q_max: f64) -> Result<SyntheticDomain> {
    let mut d = gen_terrain_with(seed, rows, cols, preset)?;
    d.calibrate_rating(q_max)?;
    Ok(d)
}

pub fn simulate_water_level(domain: &SyntheticDomain, q: f64) -> Result<Raster> {
    domain.simulate_water_level(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

impl SplitSpec {
    /// 27 discharges split 18 / 4 / 5 with validation and test values
    /// interleaved inside the training range.
    pub fn bey() -> Self {
        Self {
            train: vec![
                5.0, 20.0, 50.0, 80.0, 110.0, 140.0, 170.0, 200.0, 230.0, 260.0, 275.0, 290.0, 320.0, 335.0, 350.0,
                365.0, 380.0, 395.0,
            ],
            val: vec![35.0, 95.0, 155.0, 215.0],
            test: vec![65.0, 125.0, 185.0, 245.0, 305.0],
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        all.sort_by(f64::total_cmp);
        all
    }
}

/// Validates `spec` against `grid` and returns it with each list sorted.
pub fn make_splits(grid: &[f64], spec: &SplitSpec) -> Result<SplitSpec> {
    let lists = [("train", &spec.train), ("val", &spec.val), ("test", &spec.test)];
    for (name, list) in lists {
        if list.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
        if let Some(q) = list.iter().find(|q| !(**q > 0.0)) {
            return Err(Error::Config(format!("{name} discharge {q} is not positive")));
        }
    }
    for (i, (a, la)) in lists.iter().enumerate() {
        for (b, lb) in &lists[i + 1..] {
            if let Some(q) = la.iter().find(|q| lb.contains(q)) {
                return Err(Error::Config(format!("discharge {q} appears in both {a} and {b}")));
            }
        }
        let mut seen = la.to_vec();
        seen.sort_by(f64::total_cmp);
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate discharge in {a} split")));
        }
    }
    let assigned = spec.grid();
    let mut grid_sorted = grid.to_vec();
    grid_sorted.sort_by(f64::total_cmp);
    if assigned != grid_sorted {
        return Err(Error::Config("split lists do not cover the discharge grid exactly".into()));
    }
    let lo = spec.train.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = spec.train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (name, list) in [("val", &spec.val), ("test", &spec.test)] {
        if let Some(q) = list.iter().find(|&&q| q <= lo || q >= hi) {
            return Err(Error::ExtrapolationSplit(format!(
                "{name} discharge {q} is not inside the training range ({lo}, {hi})"
            )));
        }
    }
    let sorted = |v: &Vec<f64>| {
        let mut v = v.clone();
        v.sort_by(f64::total_cmp);
        v
    };
    Ok(SplitSpec {
        train: sorted(&spec.train),
        val: sorted(&spec.val),
        test: sorted(&spec.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDomain {
        build_domain(7, 64, 96, &TerrainPreset::source(), 395.0).unwrap()
    }

    #[test]
    fn same_seed_same_dem() {
        let a = gen_terrain(3, 64, 80).unwrap();
        let b = gen_terrain(3, 64, 80).unwrap();
        assert_eq!(a.dem.values(), b.dem.values());
        assert_eq!(a.channel_cells, b.channel_cells);
        assert!(gen_terrain(3, 63, 80).is_err());
    }

    #[test]
    fn different_seeds_differ_in_most_cells() {
        let a = gen_terrain(1, 64, 128).unwrap();
        let b = gen_terrain(2, 64, 128).unwrap();
        let diff = a.dem.values().iter().zip(b.dem.values()).filter(|(x, y)| x != y).count();
        assert!(diff * 2 > 64 * 128, "{diff}");
    }

    #[test]
    fn channel_is_a_connected_border_to_border_path() {
        let d = gen_terrain(11, 96, 128).unwrap();
        let cells = &d.channel_cells;
        assert_eq!(cells.first().unwrap().1, 0);
        assert_eq!(cells.last().unwrap().1, 127);
        for w in cells.windows(2) {
            let dist = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
            assert_eq!(dist, 1, "{:?}", w);
        }
    }

    #[test]
    fn channel_cells_are_column_minima_locally() {
        let d = gen_terrain(5, 64, 64).unwrap();
        let z = d.dem.values();
        for &(r, c) in &d.channel_cells {
            let here = z[r * 64 + c];
            for nr in [r.wrapping_sub(1), r + 1] {
                if nr < 64 && !d.channel_cells.contains(&(nr, c)) {
                    assert!(here < z[nr * 64 + c]);
                }
            }
        }
    }

    #[test]
    fn calibration_hits_target_fraction() {
        let d = small();
        let w = d.simulate_water_level(395.0).unwrap();
        let wet = w.values().iter().filter(|&&v| v != NODATA).count() as f64 / (64.0 * 96.0);
        assert!((0.15..=0.40).contains(&wet), "{wet}");
        assert!(w.values().iter().filter(|&&v| v != NODATA).all(|&v| v > 0.0));
    }

    #[test]
    fn tiny_discharge_floods_only_near_the_channel() {
        let d = small();
        let w = d.simulate_water_level(1e-9).unwrap();
        let wet: Vec<usize> = (0..w.values().len()).filter(|&i| w.values()[i] != NODATA).collect();
        assert!(!wet.is_empty());
        for i in wet {
            assert!(d.channel_cells.contains(&(i / 96, i % 96)));
        }
        assert!(d.simulate_water_level(0.0).is_err());
    }

    #[test]
    fn walled_pit_stays_dry() {
        let mut d = small();
        let w = d.simulate_water_level(395.0).unwrap();
        // a dry cell well away from the channel
        let far = (0..w.values().len())
            .find(|&i| {
                let (r, c) = (i / 96, i % 96);
                (3..61).contains(&r) && (3..93).contains(&c) && w.values()[i] == NODATA && {
                    (r - 2..=r + 2).all(|rr| (c - 2..=c + 2).all(|cc| w.values()[rr * 96 + cc] == NODATA))
                }
            })
            .expect("a dry 5x5 block");
        let (r, c) = (far / 96, far % 96);
        let mut z = d.dem.values().to_vec();
        z[r * 96 + c] = 0.0;
        for (rr, cc) in [(r - 1, c - 1), (r - 1, c), (r - 1, c + 1), (r, c - 1), (r, c + 1), (r + 1, c - 1), (r + 1, c), (r + 1, c + 1)] {
            z[rr * 96 + cc] = 1e4;
        }
        d.dem = d.dem.with_values(z).unwrap();
        let after = d.simulate_water_level(395.0).unwrap();
        assert_eq!(after.values()[r * 96 + c], NODATA);
    }

    #[test]
    fn bey_splits() {
        let spec = SplitSpec::bey();
        let s = make_splits(&spec.grid(), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (18, 4, 5));
        assert_eq!(s, make_splits(&spec.grid(), &spec).unwrap());

        let mut bad = spec.clone();
        bad.test.push(400.0);
        let err = make_splits(&bad.grid(), &bad).unwrap_err();
        assert!(matches!(err, Error::ExtrapolationSplit(_)));

        let mut overlap = spec.clone();
        overlap.val.push(5.0);
        assert!(make_splits(&spec.grid(), &overlap).is_err());
    }
}
