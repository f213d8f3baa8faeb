//! Rotary position embeddings over one or two spatial axes.
//!
//! Frequencies are stored 0-based: `freqs[i] = base^(-2i / axis_dim)`, which
//! is the printed 1-based schedule `theta_j = b^(-2(j-1)/d')` with `j = i + 1`.
//! [`RopeConfig::index_origin`] only changes how indices are reported.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub axis_dim: usize,
    pub index_origin: u8,
}

impl RopeConfig {
    pub fn new(base: f64, axis_dim: usize) -> Self {
        Self {
            base,
            axis_dim,
            index_origin: 1,
        }
    }

    pub fn with_index_origin(mut self, origin: u8) -> Self {
        self.index_origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::Config(format!("base must exceed 1, got {}", self.base)));
        }
        if self.axis_dim < 2 || !self.axis_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "axis_dim must be even and at least 2, got {}",
                self.axis_dim
            )));
        }
        if self.index_origin > 1 {
            return Err(Error::Config(format!(
                "index_origin must be 0 or 1, got {}",
                self.index_origin
            )));
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        self.axis_dim / 2
    }
}

/// One modified frequency, by 0-based storage index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub index: usize,
    pub old: f64,
    pub new: f64,
}

/// Per-pair angular frequencies for a single axis.
///
/// Serializes to the schedule document shared by every CLI subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySchedule {
    pub base: f64,
    pub axis_dim: usize,
    pub index_origin: u8,
    pub freqs: Vec<f64>,
    #[serde(default)]
    pub corrections: Vec<Correction>,
}

impl FrequencySchedule {
    /// Builds a schedule from explicit frequencies, e.g. synthetic fixtures.
    pub fn from_freqs(config: RopeConfig, freqs: Vec<f64>) -> Result<Self> {
        let schedule = Self {
            base: config.base,
            axis_dim: config.axis_dim,
            index_origin: config.index_origin,
            freqs,
            corrections: Vec::new(),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn config(&self) -> RopeConfig {
        RopeConfig {
            base: self.base,
            axis_dim: self.axis_dim,
            index_origin: self.index_origin,
        }
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        if self.freqs.len() != self.axis_dim / 2 {
            return Err(Error::Config(format!(
                "schedule has {} frequencies but axis_dim {} needs {}",
                self.freqs.len(),
                self.axis_dim,
                self.axis_dim / 2
            )));
        }
        if let Some((i, f)) = self
            .freqs
            .iter()
            .enumerate()
            .find(|(_, f)| !(f.is_finite() && **f > 0.0))
        {
            return Err(Error::Config(format!("frequency {i} must be positive, got {f}")));
        }
        Ok(())
    }

    /// Index as printed under this schedule's convention.
    pub fn display_index(&self, index: usize) -> usize {
        index + self.index_origin as usize
    }

    /// Whether `index` has been overwritten by a correction.
    pub fn is_corrected(&self, index: usize) -> bool {
        self.corrections.iter().any(|c| c.index == index)
    }

    pub fn period(&self, index: usize) -> f64 {
        TAU / self.freqs[index]
    }

    /// Replaces one frequency and records the change.
    pub fn set_freq(&mut self, index: usize, value: f64) {
        let old = self.freqs[index];
        self.freqs[index] = value;
        self.corrections.push(Correction {
            index,
            old,
            new: value,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schedule: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("schedule: {e}")))?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Training and target token-grid extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    pub train_h: usize,
    pub train_w: usize,
    pub target_h: usize,
    pub target_w: usize,
}

impl ResolutionSpec {
    pub fn new(train_h: usize, train_w: usize, target_h: usize, target_w: usize) -> Result<Self> {
        let spec = Self {
            train_h,
            train_w,
            target_h,
            target_w,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_h == 0 || self.train_w == 0 || self.target_h == 0 || self.target_w == 0 {
            return Err(Error::Config("grid extents must be positive".into()));
        }
        if self.target_h < self.train_h || self.target_w < self.train_w {
            return Err(Error::Config(format!(
                "target {}x{} is smaller than training grid {}x{}",
                self.target_h, self.target_w, self.train_h, self.train_w
            )));
        }
        Ok(())
    }

    pub fn ratio_h(&self) -> f64 {
        self.target_h as f64 / self.train_h as f64
    }

    pub fn ratio_w(&self) -> f64 {
        self.target_w as f64 / self.train_w as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodTable {
    pub periods: Vec<f64>,
    pub dominant_index: usize,
    pub reference_length: usize,
}

pub fn build_schedule(config: RopeConfig) -> Result<FrequencySchedule> {
    config.validate()?;
    let d = config.axis_dim as f64;
    let freqs = (0..config.pairs())
        .map(|i| config.base.powf(-2.0 * i as f64 / d))
        .collect();
    Ok(FrequencySchedule {
        base: config.base,
        axis_dim: config.axis_dim,
        index_origin: config.index_origin,
        freqs,
        corrections: Vec::new(),
    })
}

fn rotate_into<T: Scalar>(x: &[T], position: f64, freqs: &[f64], out: &mut [T]) {
    for (j, &theta) in freqs.iter().enumerate() {
        let (sin, cos) = (position * theta).sin_cos();
        let a = x[2 * j].as_f64();
        let b = x[2 * j + 1].as_f64();
        out[2 * j] = T::of(cos * a - sin * b);
        out[2 * j + 1] = T::of(sin * a + cos * b);
    }
}

/// Rotates each feature pair `(x[2j], x[2j+1])` by `position * freqs[j]`.
pub fn apply_rope_1d<T: Scalar>(
    x: &[T],
    position: f64,
    schedule: &FrequencySchedule,
) -> Result<Vec<T>> {
    if x.len() != 2 * schedule.len() {
        return Err(Error::Dimension(format!(
            "vector of length {} does not match {} frequency pairs",
            x.len(),
            schedule.len()
        )));
    }
    let mut out = vec![T::zero(); x.len()];
    rotate_into(x, position, &schedule.freqs, &mut out);
    Ok(out)
}

/// Height rotation on the leading coordinates, width rotation on the rest.
pub fn apply_rope_2d<T: Scalar>(
    x: &[T],
    pos_h: f64,
    pos_w: f64,
    sched_h: &FrequencySchedule,
    sched_w: &FrequencySchedule,
) -> Result<Vec<T>> {
    let mut out = x.to_vec();
    apply_rope_2d_in_place(&mut out, pos_h, pos_w, sched_h, sched_w)?;
    Ok(out)
}

pub(crate) fn apply_rope_2d_in_place<T: Scalar>(
    x: &mut [T],
    pos_h: f64,
    pos_w: f64,
    sched_h: &FrequencySchedule,
    sched_w: &FrequencySchedule,
) -> Result<()> {
    let split = 2 * sched_h.len();
    if x.len() != split + 2 * sched_w.len() {
        return Err(Error::Dimension(format!(
            "vector of length {} does not match {} + {} frequency pairs",
            x.len(),
            sched_h.len(),
            sched_w.len()
        )));
    }
    let (head, tail) = x.split_at_mut(split);
    let src_h = head.to_vec();
    rotate_into(&src_h, pos_h, &sched_h.freqs, head);
    let src_w = tail.to_vec();
    rotate_into(&src_w, pos_w, &sched_w.freqs, tail);
    Ok(())
}

fn nearest_period(periods: &[f64], length: f64, eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &t) in periods.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        let gap = (t - length).abs();
        // strict `<` keeps the smaller index on ties
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((i, gap));
        }
    }
    best.map(|(i, _)| i)
}

/// Index whose period is nearest `length`, skipping indices where `eligible`
/// is false. Ties resolve toward the smaller index.
pub(crate) fn dominant_among(
    schedule: &FrequencySchedule,
    length: f64,
    eligible: impl Fn(usize) -> bool,
) -> Option<usize> {
    let periods: Vec<f64> = schedule.freqs.iter().map(|f| TAU / f).collect();
    nearest_period(&periods, length, eligible)
}

pub fn period_table(schedule: &FrequencySchedule, reference_length: usize) -> Result<PeriodTable> {
    schedule.validate()?;
    if reference_length == 0 {
        return Err(Error::Argument("reference length must be at least 1".into()));
    }
    let periods: Vec<f64> = schedule.freqs.iter().map(|f| TAU / f).collect();
    let dominant_index = nearest_period(&periods, reference_length as f64, |_| true)
        .expect("validated schedule has at least one frequency");
    Ok(PeriodTable {
        periods,
        dominant_index,
        reference_length,
    })
}

/// True iff the frequency at `dominant_index` completes at most one revolution
/// over `target_length` positions.
pub fn check_non_repetition(
    schedule: &FrequencySchedule,
    dominant_index: usize,
    target_length: usize,
) -> Result<bool> {
    let theta = *schedule.freqs.get(dominant_index).ok_or_else(|| {
        Error::Argument(format!(
            "index {dominant_index} out of range for {} frequencies",
            schedule.len()
        ))
    })?;
    if target_length == 0 {
        return Err(Error::Argument("target length must be positive".into()));
    }
    Ok(theta <= TAU / target_length as f64)
}

/// All position pairs `p < q < length` whose `(cos, sin)` encodings at
/// `index` agree within `tolerance` in both components.
///
/// Angles are sorted on the circle and only near neighbours are compared, so
/// the cost is proportional to `length log length` plus the output size.
pub fn encoding_collisions(
    schedule: &FrequencySchedule,
    index: usize,
    length: usize,
    tolerance: f64,
) -> Result<Vec<(usize, usize)>> {
    let theta = *schedule.freqs.get(index).ok_or_else(|| {
        Error::Argument(format!(
            "index {index} out of range for {} frequencies",
            schedule.len()
        ))
    })?;
    if length < 2 {
        return Err(Error::Argument("collision scan needs length >= 2".into()));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::Argument(format!("tolerance must be non-negative, got {tolerance}")));
    }

    let encode = |p: usize| {
        let (s, c) = (theta * p as f64).sin_cos();
        (c, s)
    };
    let close = |p: usize, q: usize| {
        let (cp, sp) = encode(p);
        let (cq, sq) = encode(q);
        (cp - cq).abs() <= tolerance && (sp - sq).abs() <= tolerance
    };

    // Max-norm distance <= tol implies chord <= sqrt(2) tol, which bounds the
    // arc. The margin covers rounding in the wrapped angles.
    let chord = (std::f64::consts::SQRT_2 * tolerance).min(2.0);
    let arc_limit = 2.0 * (chord / 2.0).asin() + 1e-9;

    let mut angles: Vec<(f64, usize)> = (0..length)
        .map(|p| ((theta * p as f64).rem_euclid(TAU), p))
        .collect();
    angles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut pairs = Vec::new();
    if arc_limit >= std::f64::consts::PI {
        for p in 0..length {
            for q in p + 1..length {
                if close(p, q) {
                    pairs.push((p, q));
                }
            }
        }
        return Ok(pairs);
    }

    let n = angles.len();
    for a in 0..n {
        let (angle_a, p) = angles[a];
        // walk forward around the circle, wrapping once
        for step in 1..n {
            let (angle_b, q) = angles[(a + step) % n];
            let mut gap = angle_b - angle_a;
            if a + step >= n {
                gap += TAU;
            }
            if gap > arc_limit {
                break;
            }
            if close(p, q) {
                pairs.push((p.min(q), p.max(q)));
            }
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn tiny_schedule_is_forced() {
        // exponents 0 and -2/4
        let s = build_schedule(RopeConfig::new(100.0, 4)).unwrap();
        assert_eq!(s.freqs, vec![1.0, 0.1]);
        assert!(s.corrections.is_empty());
    }

    #[test]
    fn default_schedule_matches_closed_form() {
        let s = build_schedule(RopeConfig::new(10000.0, 56)).unwrap();
        assert_eq!(s.len(), 28);
        assert_eq!(s.freqs[0], 1.0);
        for j in 1..=28usize {
            let expected = 10000f64.powf(-2.0 * (j as f64 - 1.0) / 56.0);
            assert!((s.freqs[j - 1] - expected).abs() <= 1e-15 * expected);
        }
        assert!(s.freqs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(matches!(build_schedule(RopeConfig::new(100.0, 5)), Err(Error::Config(_))));
        assert!(matches!(build_schedule(RopeConfig::new(1.0, 4)), Err(Error::Config(_))));
        assert!(matches!(build_schedule(RopeConfig::new(100.0, 0)), Err(Error::Config(_))));
        assert!(build_schedule(RopeConfig::new(100.0, 4).with_index_origin(2)).is_err());
    }

    #[test]
    fn zero_position_is_identity() {
        let s = build_schedule(RopeConfig::new(10000.0, 8)).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0, -0.7, 0.1, 0.9, -0.4];
        assert_eq!(apply_rope_1d(&x, 0.0, &s).unwrap(), x.to_vec());
    }

    #[test]
    fn quarter_turn() {
        let s = FrequencySchedule::from_freqs(RopeConfig::new(100.0, 2), vec![FRAC_PI_2]).unwrap();
        let y = apply_rope_1d(&[1.0f64, 0.0], 1.0, &s).unwrap();
        assert!(y[0].abs() < 1e-15);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let s = build_schedule(RopeConfig::new(100.0, 4)).unwrap();
        assert!(matches!(apply_rope_1d(&[1.0f64; 3], 1.0, &s), Err(Error::Dimension(_))));
        assert!(matches!(
            apply_rope_2d(&[1.0f64; 6], 1.0, 1.0, &s, &s),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn height_rotation_leaves_width_untouched() {
        let sh = build_schedule(RopeConfig::new(10000.0, 4)).unwrap();
        let sw = build_schedule(RopeConfig::new(10000.0, 6)).unwrap();
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.25 - 1.0).collect();
        assert_eq!(apply_rope_2d(&x, 0.0, 0.0, &sh, &sw).unwrap(), x);
        let y = apply_rope_2d(&x, 3.0, 0.0, &sh, &sw).unwrap();
        assert_eq!(&y[4..], &x[4..]);
        assert_ne!(&y[..4], &x[..4]);
        assert!((norm(&y) - norm(&x)).abs() < 1e-12);
    }

    #[test]
    fn periods_of_tiny_schedule() {
        let s = build_schedule(RopeConfig::new(100.0, 4)).unwrap();
        let t = period_table(&s, 6).unwrap();
        assert!((t.periods[0] - 2.0 * PI).abs() < 1e-12);
        assert!((t.periods[1] - 20.0 * PI).abs() < 1e-12);
        assert_eq!(t.dominant_index, 0);
    }

    #[test]
    fn exact_period_of_target() {
        let h = 96usize;
        let s = FrequencySchedule::from_freqs(RopeConfig::new(100.0, 2), vec![TAU / h as f64]).unwrap();
        assert_eq!(period_table(&s, 10).unwrap().periods[0], h as f64);
    }

    #[test]
    fn tie_breaks_to_smaller_index() {
        // periods 10 and 20, reference 15 sits midway
        let s = FrequencySchedule::from_freqs(
            RopeConfig::new(100.0, 4),
            vec![TAU / 10.0, TAU / 20.0],
        )
        .unwrap();
        let periods = period_table(&s, 15).unwrap().periods;
        assert_eq!((periods[0] - 15.0).abs(), (periods[1] - 15.0).abs());
        assert_eq!(period_table(&s, 15).unwrap().dominant_index, 0);
        assert_eq!(period_table(&s, 16).unwrap().dominant_index, 1);
    }

    #[test]
    fn non_repetition_boundary() {
        let h = 128usize;
        let cfg = RopeConfig::new(100.0, 4);
        let at = FrequencySchedule::from_freqs(cfg, vec![TAU / h as f64, 0.001]).unwrap();
        assert!(check_non_repetition(&at, 0, h).unwrap());
        let short = FrequencySchedule::from_freqs(cfg, vec![TAU / (h - 1) as f64, 0.001]).unwrap();
        assert!(!check_non_repetition(&short, 0, h).unwrap());
        assert!(matches!(check_non_repetition(&at, 2, h), Err(Error::Argument(_))));
    }

    #[test]
    fn integer_period_collisions_are_reported() {
        let t = 7usize;
        let len = 30usize;
        let s = FrequencySchedule::from_freqs(RopeConfig::new(100.0, 2), vec![TAU / t as f64]).unwrap();
        let pairs = encoding_collisions(&s, 0, len, 1e-9).unwrap();
        for p in 0..len - t {
            assert!(pairs.contains(&(p, p + t)), "missing ({p}, {})", p + t);
        }
        assert!(pairs.iter().all(|(p, q)| (q - p) % t == 0));
    }

    #[test]
    fn corrected_frequency_is_injective_on_one_revolution() {
        let h = 200usize;
        let s = FrequencySchedule::from_freqs(RopeConfig::new(100.0, 2), vec![TAU / h as f64]).unwrap();
        assert!(encoding_collisions(&s, 0, h, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn collisions_match_pairwise_scan() {
        let theta = 0.731_f64 * std::f64::consts::E;
        let s = FrequencySchedule::from_freqs(RopeConfig::new(100.0, 2), vec![theta]).unwrap();
        for &tol in &[1e-9, 1e-3, 0.05, 0.3, 1.5] {
            let len = 120;
            let mut brute = Vec::new();
            for p in 0..len {
                for q in p + 1..len {
                    let (sp, cp) = (theta * p as f64).sin_cos();
                    let (sq, cq) = (theta * q as f64).sin_cos();
                    if (cp - cq).abs() <= tol && (sp - sq).abs() <= tol {
                        brute.push((p, q));
                    }
                }
            }
            assert_eq!(encoding_collisions(&s, 0, len, tol).unwrap(), brute, "tol {tol}");
        }
    }

    #[test]
    fn schedule_json_shape() {
        let mut s = build_schedule(RopeConfig::new(100.0, 4)).unwrap();
        s.set_freq(1, 0.5);
        let v: serde_json::Value = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(v["base"], 100.0);
        assert_eq!(v["axis_dim"], 4);
        assert_eq!(v["index_origin"], 1);
        assert_eq!(v["freqs"][1], 0.5);
        assert_eq!(v["corrections"][0]["index"], 1);
        assert_eq!(v["corrections"][0]["old"], 0.1);
        assert_eq!(v["corrections"][0]["new"], 0.5);
        assert_eq!(FrequencySchedule::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn malformed_schedule_json() {
        assert!(matches!(FrequencySchedule::from_json("{"), Err(Error::Format(_))));
        let bad = r#"{"base":100,"axis_dim":4,"index_origin":1,"freqs":[1.0],"corrections":[]}"#;
        assert!(matches!(FrequencySchedule::from_json(bad), Err(Error::Config(_))));
    }

    #[test]
    fn resolution_ratios() {
        let r = ResolutionSpec::new(64, 32, 256, 64).unwrap();
        assert_eq!(r.ratio_h(), 4.0);
        assert_eq!(r.ratio_w(), 2.0);
        assert!(ResolutionSpec::new(64, 64, 32, 64).is_err());
    }
}
