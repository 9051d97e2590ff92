use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::MicrogridError;

use super::MicrogridConfig;

/// Renewable availability and demand per step, `[k][unit]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub res: Vec<Vec<f64>>,
    pub demand: Vec<Vec<f64>>,
}

impl Profiles {
    pub fn new(res: Vec<Vec<f64>>, demand: Vec<Vec<f64>>) -> Result<Self, MicrogridError> {
        if res.len() != demand.len() {
            return Err(MicrogridError::InvalidConfig(format!(
                "{} renewable rows but {} demand rows",
                res.len(),
                demand.len()
            )));
        }
        let p = Self { res, demand };
        let width = |rows: &[Vec<f64>]| rows.first().map_or(0, Vec::len);
        let (wr, wd) = (width(&p.res), width(&p.demand));
        for k in 0..p.len() {
            if p.res[k].len() != wr || p.demand[k].len() != wd {
                return Err(MicrogridError::InvalidConfig(format!(
                    "ragged profile row {k}"
                )));
            }
            if p.res[k]
                .iter()
                .chain(&p.demand[k])
                .any(|v| !(*v >= 0.0) || !v.is_finite())
            {
                return Err(MicrogridError::InvalidConfig(format!(
                    "negative or non-finite profile value at step {k}"
                )));
            }
        }
        Ok(p)
    }

    /// All-zero profiles for `k` steps.
    pub fn zeros(k: usize, renewables: usize, loads: usize) -> Self {
        Self {
            res: vec![vec![0.0; renewables]; k],
            demand: vec![vec![0.0; loads]; k],
        }
    }

    pub fn len(&self) -> usize {
        self.res.len()
    }

    pub fn is_empty(&self) -> bool {
        self.res.is_empty()
    }

    pub fn renewables(&self) -> usize {
        self.res.first().map_or(0, Vec::len)
    }

    pub fn loads(&self) -> usize {
        self.demand.first().map_or(0, Vec::len)
    }

    /// `len` steps starting at `k`; past the end the last row repeats.
    pub fn window(&self, k: usize, len: usize) -> Self {
        let last = self.len().saturating_sub(1);
        let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (k..k + len).map(|i| rows[i.min(last)].clone()).collect()
        };
        Self {
            res: pick(&self.res),
            demand: pick(&self.demand),
        }
    }

    pub fn peak_demand(&self) -> f64 {
        self.demand
            .iter()
            .map(|row| row.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// CSV with header `k,w_r1,…,w_d1,…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MicrogridError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["k".to_string()];
        header.extend((1..=self.renewables()).map(|i| format!("w_r{i}")));
        header.extend((1..=self.loads()).map(|i| format!("w_d{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..self.len() {
            let mut row = vec![k.to_string()];
            row.extend(
                self.res[k]
                    .iter()
                    .chain(&self.demand[k])
                    .map(|v| format!("{v:.16e}")),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| MicrogridError::InvalidConfig(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, MicrogridError> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"k") {
            return Err(MicrogridError::InvalidConfig(
                "profile column `k` missing".into(),
            ));
        }
        let nr = cols.iter().filter(|c| c.starts_with("w_r")).count();
        let nd = cols.iter().filter(|c| c.starts_with("w_d")).count();
        for (i, c) in cols[1..].iter().enumerate() {
            let want = if i < nr {
                format!("w_r{}", i + 1)
            } else {
                format!("w_d{}", i - nr + 1)
            };
            if *c != want {
                return Err(MicrogridError::InvalidConfig(format!(
                    "profile column `{c}` where `{want}` expected"
                )));
            }
        }
        let (mut res, mut demand) = (Vec::new(), Vec::new());
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MicrogridError::InvalidConfig(format!("profile row {k}: {e}")))?;
            if vals.len() != nr + nd {
                return Err(MicrogridError::InvalidConfig(format!(
                    "profile row {k} is short"
                )));
            }
            res.push(vals[..nr].to_vec());
            demand.push(vals[nr..].to_vec());
        }
        Self::new(res, demand)
    }
}

fn csv_err(e: csv::Error) -> MicrogridError {
    MicrogridError::InvalidConfig(format!("profile csv: {e}"))
}

/// Shape of the synthetic week: a daily demand wave, a wind-like random walk
/// on the first renewable and a daylight bell on the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileShape {
    pub sampling_time_h: f64,
    pub demand_peak: f64,
    pub demand_base: f64,
    /// Hour of the demand maximum.
    pub demand_peak_hour: f64,
    pub demand_noise: f64,
    pub wind_max: f64,
    pub wind_step: f64,
    pub pv_peak: f64,
    pub sunrise_h: f64,
    pub sunset_h: f64,
}

impl Default for ProfileShape {
    fn default() -> Self {
        Self {
            sampling_time_h: 0.5,
            demand_peak: 1.1,
            demand_base: 0.45,
            demand_peak_hour: 18.0,
            demand_noise: 0.03,
            wind_max: 0.6,
            wind_step: 0.08,
            pv_peak: 0.8,
            sunrise_h: 6.0,
            sunset_h: 20.0,
        }
    }
}

impl ProfileShape {
    pub fn for_config(cfg: &MicrogridConfig) -> Self {
        Self {
            sampling_time_h: cfg.sampling_time_h,
            ..Self::default()
        }
    }

    fn is_daylight(&self, hour: f64) -> bool {
        hour > self.sunrise_h && hour < self.sunset_h
    }
}

/// Deterministic synthetic profiles for `k` steps; the first renewable is
/// wind-like, the second (if any) follows daylight, further ones alternate.
pub fn generate_profiles(
    seed: u64,
    k: usize,
    shape: &ProfileShape,
    cfg: &MicrogridConfig,
) -> Result<Profiles, MicrogridError> {
    if k == 0 {
        return Err(MicrogridError::InvalidConfig(
            "profile length must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nr = cfg.renewables();
    let nd = cfg.loads().max(1);
    let mut wind = vec![0.5 * shape.wind_max; nr];
    let (mut res, mut demand) = (Vec::with_capacity(k), Vec::with_capacity(k));
    let mid = 0.5 * (shape.demand_peak + shape.demand_base);
    let amp = 0.5 * (shape.demand_peak - shape.demand_base);
    for step in 0..k {
        let hour = (step as f64 * shape.sampling_time_h) % 24.0;
        let wave = mid + amp * (2.0 * PI * (hour - shape.demand_peak_hour + 6.0) / 24.0).sin();
        let d: Vec<f64> = (0..cfg.loads())
            .map(|_| {
                let noise = rng.random_range(-shape.demand_noise..=shape.demand_noise);
                ((wave + noise) / nd as f64).max(0.0)
            })
            .collect();
        let mut r = Vec::with_capacity(nr);
        for (j, w) in wind.iter_mut().enumerate() {
            if j % 2 == 0 {
                *w = (*w + rng.random_range(-shape.wind_step..=shape.wind_step))
                    .clamp(0.0, shape.wind_max);
                r.push(*w);
            } else {
                let cloud: f64 = rng.random_range(0.7..=1.0);
                let value = if shape.is_daylight(hour) {
                    let x = (hour - shape.sunrise_h) / (shape.sunset_h - shape.sunrise_h);
                    shape.pv_peak * cloud * (PI * x).sin()
                } else {
                    0.0
                };
                r.push(value.max(0.0));
            }
        }
        res.push(r);
        demand.push(d);
    }
    let profiles = Profiles::new(res, demand)?;
    let peak = profiles.peak_demand();
    if peak > cfg.capacity() {
        return Err(MicrogridError::InfeasibleProfile {
            peak,
            capacity: cfg.capacity(),
        });
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonnegative() {
        let cfg = MicrogridConfig::table1();
        let shape = ProfileShape::for_config(&cfg);
        let a = generate_profiles(0, 336, &shape, &cfg).unwrap();
        let b = generate_profiles(0, 336, &shape, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 336);
        assert!(a.res.iter().chain(&a.demand).flatten().all(|v| *v >= 0.0));
        assert_ne!(a, generate_profiles(1, 336, &shape, &cfg).unwrap());
        let peak = a.peak_demand();
        assert!(peak > 0.9 && peak <= 1.2, "{peak}");
    }

    #[test]
    fn pv_dark_at_night() {
        let cfg = MicrogridConfig::table1();
        let shape = ProfileShape::for_config(&cfg);
        let p = generate_profiles(4, 96, &shape, &cfg).unwrap();
        for (k, row) in p.res.iter().enumerate() {
            let hour = (k as f64 * 0.5) % 24.0;
            if !shape.is_daylight(hour) {
                assert_eq!(row[1], 0.0, "step {k}");
            }
            assert!(row[0] <= shape.wind_max);
        }
        assert!(p.res.iter().any(|r| r[1] > 0.3));
    }

    #[test]
    fn oversized_demand_rejected() {
        let cfg = MicrogridConfig::table1();
        let shape = ProfileShape {
            demand_peak: 5.0,
            ..ProfileShape::for_config(&cfg)
        };
        assert!(matches!(
            generate_profiles(0, 48, &shape, &cfg),
            Err(MicrogridError::InfeasibleProfile { capacity, .. }) if capacity == 3.5
        ));
    }

    #[test]
    fn window_pads_with_last_row() {
        let p = Profiles::new(
            vec![vec![0.1], vec![0.2], vec![0.3]],
            vec![vec![1.0], vec![2.0], vec![3.0]],
        )
        .unwrap();
        let w = p.window(1, 4);
        assert_eq!(w.res, vec![vec![0.2], vec![0.3], vec![0.3], vec![0.3]]);
        assert_eq!(w.demand[3], vec![3.0]);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = MicrogridConfig::table1();
        let p = generate_profiles(9, 20, &ProfileShape::for_config(&cfg), &cfg).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,w_r1,w_r2,w_d1\n"));
        assert_eq!(Profiles::read_csv(buf.as_slice()).unwrap(), p);
        assert!(Profiles::read_csv("k,w_d1,w_r1\n0,1,1\n".as_bytes()).is_err());
        assert!(Profiles::new(vec![vec![-0.1]], vec![vec![0.0]]).is_err());
    }
}
