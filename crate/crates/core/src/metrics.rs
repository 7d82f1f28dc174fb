//! OKS-based average precision with ground-truth boxes, and PCKh.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt_codec::{KEYPOINT_NAMES, NUM_KEYPOINTS};
use crate::synth_data::{
    SkeletonSample, LEFT_ELBOW, LEFT_HIP, LEFT_KNEE, LEFT_SHOULDER, RIGHT_ELBOW, RIGHT_HIP, RIGHT_KNEE,
    RIGHT_SHOULDER,
};

pub type Coords = [Option<(f64, f64)>; NUM_KEYPOINTS];

/// Predicted keypoints of one sample; `None` marks a parse failure.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: u64,
    pub coords: Coords,
}

impl Prediction {
    /// Exact ground truth of a sample.
    pub fn from_truth(sample: &SkeletonSample) -> Self {
        Prediction {
            id: sample.seed,
            coords: sample.keypoints.map(Some),
        }
    }

    pub fn missing(id: u64) -> Self {
        Prediction {
            id,
            coords: [None; NUM_KEYPOINTS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub falloff: [f64; NUM_KEYPOINTS],
    /// `[lo, hi)` area band for the medium column, squared pixels.
    pub medium_area: (f64, f64),
    /// Lower area bound of the large column, squared pixels.
    pub large_area: f64,
}

impl Default for OksParams {
    fn default() -> Self {
        OksParams {
            falloff: [0.08; NUM_KEYPOINTS],
            medium_area: (32.0 * 32.0, 96.0 * 96.0),
            large_area: 96.0 * 96.0,
        }
    }
}

/// Per-keypoint constants published with the COCO keypoint toolkit.
pub const COCO_FALLOFF: [f64; NUM_KEYPOINTS] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087,
    0.087, 0.089, 0.089,
];

impl OksParams {
    pub fn validate(&self) -> Result<()> {
        if self.falloff.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::Config("metrics.falloff constants must be positive".into()));
        }
        let (lo, hi) = self.medium_area;
        if !(0.0 <= lo && lo < hi) || self.large_area < 0.0 {
            return Err(Error::Config("metrics area bands must be ordered and non-negative".into()));
        }
        Ok(())
    }
}

/// Object keypoint similarity; coordinates and `area` share one unit.
/// `None` when no keypoint is visible or the area is not positive.
pub fn oks(
    pred: &[Option<(f64, f64)>],
    gt: &[(f64, f64)],
    visible: &[bool],
    area: f64,
    falloff: &[f64],
) -> Option<f64> {
    if !(area > 0.0) {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..gt.len() {
        if !visible[i] {
            continue;
        }
        n += 1;
        if let Some((x, y)) = pred[i] {
            let d2 = (x - gt[i].0).powi(2) + (y - gt[i].1).powi(2);
            sum += (-d2 / (2.0 * area * falloff[i] * falloff[i])).exp();
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `0.50, 0.55, ..., 0.95`.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Percentage of scores at or above `t`; zero for an empty set.
pub fn precision_at(scores: &[f64], t: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    100.0 * scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
}

pub fn mean_precision(scores: &[f64]) -> f64 {
    oks_thresholds().iter().map(|&t| precision_at(scores, t)).sum::<f64>() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no instance falls in the band.
    pub apm: Option<f64>,
    pub apl: Option<f64>,
    pub ar: f64,
    pub pckh_05: f64,
    pub pckh_01: f64,
    pub shoulders: f64,
    pub elbows: f64,
    pub hips: f64,
    pub knees: f64,
    pub instances: usize,
    pub missing_keypoints: usize,
}

/// Pairs every sample with its prediction; absent predictions count as misses.
fn align<'a>(predictions: &'a [Prediction], dataset: &[SkeletonSample]) -> Result<Vec<Option<&'a Prediction>>> {
    let mut by_id: BTreeMap<u64, &Prediction> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.id, p).is_some() {
            return Err(Error::Integrity(format!("duplicate prediction for sample {}", p.id)));
        }
    }
    let out: Vec<_> = dataset.iter().map(|s| by_id.remove(&s.seed)).collect();
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Integrity(format!("prediction for unknown sample {id}")));
    }
    Ok(out)
}

/// Per-instance OKS in pixel units, with the instance area.
pub fn instance_scores(
    predictions: &[Prediction],
    dataset: &[SkeletonSample],
    params: &OksParams,
) -> Result<Vec<(f64, f64)>> {
    let aligned = align(predictions, dataset)?;
    let mut out = Vec::new();
    for (s, p) in dataset.iter().zip(aligned) {
        let scale = s.width as f64;
        let px = |c: (f64, f64)| (c.0 * scale, c.1 * scale);
        let pred: Vec<_> = match p {
            Some(p) => p.coords.iter().map(|c| c.map(px)).collect(),
            None => vec![None; NUM_KEYPOINTS],
        };
        let gt: Vec<_> = s.keypoints.iter().map(|&c| px(c)).collect();
        let vis: Vec<bool> = (0..NUM_KEYPOINTS).map(|k| s.is_visible(k)).collect();
        if let Some(score) = oks(&pred, &gt, &vis, s.area, &params.falloff) {
            out.push((score, s.area));
        }
    }
    Ok(out)
}

pub struct PckhCounts {
    pub correct: [usize; NUM_KEYPOINTS],
    pub visible: [usize; NUM_KEYPOINTS],
}

impl PckhCounts {
    fn percent(&self, keys: &[usize]) -> f64 {
        let c: usize = keys.iter().map(|&k| self.correct[k]).sum();
        let v: usize = keys.iter().map(|&k| self.visible[k]).sum();
        if v == 0 {
            0.0
        } else {
            100.0 * c as f64 / v as f64
        }
    }

    pub fn overall(&self) -> f64 {
        self.percent(&(0..NUM_KEYPOINTS).collect::<Vec<_>>())
    }
}

/// Visible keypoints within `alpha * head_size` (closed threshold).
pub fn pckh_counts(predictions: &[Prediction], dataset: &[SkeletonSample], alpha: f64) -> Result<PckhCounts> {
    let aligned = align(predictions, dataset)?;
    let mut counts = PckhCounts {
        correct: [0; NUM_KEYPOINTS],
        visible: [0; NUM_KEYPOINTS],
    };
    for (s, p) in dataset.iter().zip(aligned) {
        for k in 0..NUM_KEYPOINTS {
            if !s.is_visible(k) {
                continue;
            }
            counts.visible[k] += 1;
            let Some((x, y)) = p.and_then(|p| p.coords[k]) else {
                continue;
            };
            let (gx, gy) = s.keypoints[k];
            if (x - gx).hypot(y - gy) <= alpha * s.head_size {
                counts.correct[k] += 1;
            }
        }
    }
    Ok(counts)
}

pub fn pckh(predictions: &[Prediction], dataset: &[SkeletonSample], alpha: f64) -> Result<f64> {
    Ok(pckh_counts(predictions, dataset, alpha)?.overall())
}

pub fn evaluate(predictions: &[Prediction], dataset: &[SkeletonSample], params: &OksParams) -> Result<EvalReport> {
    params.validate()?;
    let scored = instance_scores(predictions, dataset, params)?;
    let all: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let band = |keep: &dyn Fn(f64) -> bool| -> Option<f64> {
        let s: Vec<f64> = scored.iter().filter(|s| keep(s.1)).map(|s| s.0).collect();
        (!s.is_empty()).then(|| mean_precision(&s))
    };
    let (lo, hi) = params.medium_area;
    let half = pckh_counts(predictions, dataset, 0.5)?;
    let tenth = pckh_counts(predictions, dataset, 0.1)?;
    let aligned = align(predictions, dataset)?;
    let missing_keypoints = dataset
        .iter()
        .zip(aligned)
        .map(|(s, p)| {
            (0..NUM_KEYPOINTS)
                .filter(|&k| s.is_visible(k) && p.is_none_or(|p| p.coords[k].is_none()))
                .count()
        })
        .sum();
    let ap = mean_precision(&all);
    Ok(EvalReport {
        ap,
        ap50: precision_at(&all, 0.5),
        ap75: precision_at(&all, 0.75),
        apm: band(&|a| lo <= a && a < hi),
        apl: band(&|a| a >= params.large_area),
        // One prediction per instance: recall at each threshold equals precision.
        ar: ap,
        pckh_05: half.overall(),
        pckh_01: tenth.overall(),
        shoulders: half.percent(&[LEFT_SHOULDER, RIGHT_SHOULDER]),
        elbows: half.percent(&[LEFT_ELBOW, RIGHT_ELBOW]),
        hips: half.percent(&[LEFT_HIP, RIGHT_HIP]),
        knees: half.percent(&[LEFT_KNEE, RIGHT_KNEE]),
        instances: all.len(),
        missing_keypoints,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |v| format!("{v:.1}"))
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "AP", "AP50", "AP75", "APM", "APL", "AR");
        let _ = writeln!(
            s,
            "{:>6.1} {:>6.1} {:>6.1} {:>6} {:>6} {:>6.1}",
            self.ap,
            self.ap50,
            self.ap75,
            opt(self.apm),
            opt(self.apl),
            self.ar
        );
        s.push('\n');
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>7}",
            "Shou.", "Elbo.", "Hip", "Knee", "Mean", "Mean0.1"
        );
        let _ = writeln!(
            s,
            "{:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>7.1}",
            self.shoulders, self.elbows, self.hips, self.knees, self.pckh_05, self.pckh_01
        );
        s
    }

    /// `key=value` lines; absent bands are written as `nan`.
    pub fn key_values(&self) -> String {
        let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
        let pairs: [(&str, f64); 12] = [
            ("ap", self.ap),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("apm", o(self.apm)),
            ("apl", o(self.apl)),
            ("ar", self.ar),
            ("pckh_0.5", self.pckh_05),
            ("pckh_0.1", self.pckh_01),
            ("pckh_shoulders", self.shoulders),
            ("pckh_elbows", self.elbows),
            ("pckh_hips", self.hips),
            ("pckh_knees", self.knees),
        ];
        let mut s: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let _ = writeln!(s, "instances={}", self.instances);
        let _ = writeln!(s, "missing_keypoints={}", self.missing_keypoints);
        s
    }
}

/// One line per sample: id, then 17 tab-separated `x,y` or `miss` fields.
pub fn format_predictions(predictions: &[Prediction]) -> String {
    let mut s = String::new();
    for p in predictions {
        s.push_str(&p.id.to_string());
        for c in &p.coords {
            match c {
                Some((x, y)) => {
                    let _ = write!(s, "\t{x},{y}");
                }
                None => s.push_str("\tmiss"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<Prediction>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != NUM_KEYPOINTS + 1 {
            return Err(err(i + 1, format!("expected {} fields, found {}", NUM_KEYPOINTS + 1, fields.len())));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| err(i + 1, format!("bad sample id {:?}", fields[0])))?;
        let mut coords = [None; NUM_KEYPOINTS];
        for (k, f) in fields[1..].iter().enumerate() {
            if *f == "miss" {
                continue;
            }
            let parsed = f
                .split_once(',')
                .and_then(|(x, y)| Some((x.parse::<f64>().ok()?, y.parse::<f64>().ok()?)))
                .filter(|(x, y)| x.is_finite() && y.is_finite());
            match parsed {
                Some(c) => coords[k] = Some(c),
                None => {
                    return Err(err(
                        i + 1,
                        format!("bad coordinate {f:?} for {}", KEYPOINT_NAMES[k]),
                    ))
                }
            }
        }
        out.push(Prediction { id, coords });
    }
    Ok(out)
}
