//! Simulated user interaction: first prompts, error maps and corrective clicks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, BoxPrompt, Label, Point, PromptSet};
use crate::metrics::dsc;
use crate::morphology::{largest_component, squared_distance_transform};

/// Disjoint false-positive and false-negative regions of a prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMap {
    pub false_positive: BinaryMask,
    pub false_negative: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalStrategy {
    CenterOfLargestComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub jitter_fraction: f64,
    /// Probability that a training first prompt is a point rather than a box.
    pub point_box_probability: f64,
    pub eval_strategy: EvalStrategy,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            jitter_fraction: 0.2,
            point_box_probability: 0.5,
            eval_strategy: EvalStrategy::CenterOfLargestComponent,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.jitter_fraction) {
            return Err(Error::Config("jitter_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.point_box_probability) {
            return Err(Error::Config(
                "point_box_probability must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

const MAX_JITTER_ATTEMPTS: usize = 50;

/// Independent RNG stream for one session, derived from the run seed and the image id.
pub fn session_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut stream = [0u8; 8];
    stream.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(stream));
    rng
}

fn nearest_foreground(gt: &BinaryMask, cx: f64, cy: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_d = f64::INFINITY;
    for (x, y) in gt.foreground() {
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if d < best_d {
            best_d = d;
            best = (x, y);
        }
    }
    best
}

fn jittered_point(gt: &BinaryMask, jitter: f64, rng: &mut impl Rng) -> Point {
    let (cx, cy) = gt.centroid().expect("non-empty");
    let bbox = gt.bounding_box().expect("non-empty");
    let radius = jitter * ((bbox.width().pow(2) + bbox.height().pow(2)) as f64).sqrt();
    let (w, h) = (gt.width() as f64, gt.height() as f64);
    for _ in 0..MAX_JITTER_ATTEMPTS {
        let (dx, dy) = if radius > 0.0 {
            // uniform over the disk of the given radius
            loop {
                let dx = rng.random_range(-1.0..=1.0);
                let dy = rng.random_range(-1.0..=1.0);
                if dx * dx + dy * dy <= 1.0 {
                    break (dx * radius, dy * radius);
                }
            }
        } else {
            (0.0, 0.0)
        };
        let (px, py) = ((cx + dx).round(), (cy + dy).round());
        if px < 0.0 || py < 0.0 || px >= w || py >= h {
            continue;
        }
        let (px, py) = (px as usize, py as usize);
        if gt.get(py, px) {
            return Point::positive(px, py);
        }
    }
    let (x, y) = nearest_foreground(gt, cx, cy);
    Point::positive(x, y)
}

fn loose_box(gt: &BinaryMask, jitter: f64, rng: &mut impl Rng) -> BoxPrompt {
    let tight = gt.bounding_box().expect("non-empty");
    let (w, h) = (tight.width() as f64, tight.height() as f64);
    let mut push = |dim: f64| -> usize { (rng.random_range(0.0..=1.0) * jitter * dim).floor() as usize };
    let (l, r, t, b) = (push(w), push(w), push(h), push(h));
    BoxPrompt {
        x0: tight.x0.saturating_sub(l),
        y0: tight.y0.saturating_sub(t),
        x1: (tight.x1 + r).min(gt.width()),
        y1: (tight.y1 + b).min(gt.height()),
    }
}

/// First prompt of a session. Training draws a jittered point or a loose box; evaluation
/// uses the foreground pixel nearest the centroid.
pub fn initial_prompt(
    gt: &BinaryMask,
    config: &SamplerConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<PromptSet> {
    let (cx, cy) = gt.centroid().ok_or(Error::EmptyGroundTruth)?;
    match mode {
        Mode::Eval => {
            let (x, y) = nearest_foreground(gt, cx, cy);
            Ok(PromptSet::from_point(Point::positive(x, y)))
        }
        Mode::Train => {
            if rng.random_bool(config.point_box_probability) {
                Ok(PromptSet::from_point(jittered_point(
                    gt,
                    config.jitter_fraction,
                    rng,
                )))
            } else {
                Ok(PromptSet::from_box(loose_box(gt, config.jitter_fraction, rng)))
            }
        }
    }
}

/// Tight ground-truth box, the zero-jitter start for box-only models.
pub fn tight_box_prompt(gt: &BinaryMask) -> Result<PromptSet> {
    gt.bounding_box()
        .map(PromptSet::from_box)
        .ok_or(Error::EmptyGroundTruth)
}

pub fn compute_error_map(pred: &BinaryMask, gt: &BinaryMask) -> Result<ErrorMap> {
    gt.ensure_same_shape(pred)?;
    Ok(ErrorMap {
        false_positive: pred.minus(gt),
        false_negative: gt.minus(pred),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Click {
    Point(Point),
    Done,
}

/// Interior-most pixel of the largest component, first in row-major order on ties.
fn center_of_largest_component(region: &BinaryMask) -> (usize, usize) {
    let component = largest_component(region);
    let dist = squared_distance_transform(&component);
    let w = region.width();
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, d) in dist.iter().enumerate() {
        if component.data()[i] != 0 && *d > best_d {
            best_d = *d;
            best = i;
        }
    }
    (best % w, best / w)
}

/// Corrective click on the dominant error region; ties favour a positive click.
pub fn next_click(
    pred: &BinaryMask,
    gt: &BinaryMask,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Click> {
    let errors = compute_error_map(pred, gt)?;
    let (n_fp, n_fn) = (errors.false_positive.count(), errors.false_negative.count());
    if n_fp == 0 && n_fn == 0 {
        return Ok(Click::Done);
    }
    let (region, label) = if n_fn >= n_fp {
        (&errors.false_negative, Label::Positive)
    } else {
        (&errors.false_positive, Label::Negative)
    };
    let (x, y) = match mode {
        Mode::Train => {
            let k = rng.random_range(0..region.count());
            region.foreground().nth(k).expect("index within count")
        }
        Mode::Eval => center_of_largest_component(region),
    };
    Ok(Click::Point(Point { x, y, label }))
}

/// One prompt in a session log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PromptEvent {
    Point(Point),
    Box(BoxPrompt),
}

/// Per-image record of a simulated session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTrace {
    pub image_id: String,
    /// DSC after each click; entry `i` follows click `i + 1`.
    pub dsc_per_click: Vec<f64>,
    /// One entry per click, aligned with `dsc_per_click`.
    pub prompts: Vec<PromptEvent>,
}

impl InteractionTrace {
    pub fn len(&self) -> usize {
        self.dsc_per_click.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dsc_per_click.is_empty()
    }

    pub fn last_dsc(&self) -> Option<f64> {
        self.dsc_per_click.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Point,
    Box,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    pub budget: usize,
    pub mode: Mode,
    pub start: StartMode,
    /// Stop once DSC reaches this value.
    pub stop_at: Option<f64>,
}

impl SessionOptions {
    pub fn eval(budget: usize) -> Self {
        Self {
            budget,
            mode: Mode::Eval,
            start: StartMode::Point,
            stop_at: None,
        }
    }
}

/// Runs a click session against `predict`, which maps the accumulated prompts to a mask.
///
/// Click 1 is the first prompt (a point, or the tight box in box-start mode); each further
/// click corrects the dominant error of the latest prediction. The session ends at the
/// budget, when the prediction equals `gt`, or once `stop_at` is reached.
pub fn simulate_session<F>(
    mut predict: F,
    image_id: &str,
    gt: &BinaryMask,
    options: &SessionOptions,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(InteractionTrace, PromptSet, BinaryMask)>
where
    F: FnMut(&PromptSet) -> Result<BinaryMask>,
{
    if options.budget == 0 {
        return Err(Error::Config("click budget must be at least 1".into()));
    }
    let mut prompts = match options.start {
        StartMode::Point => initial_prompt(gt, config, options.mode, rng)?,
        StartMode::Box => tight_box_prompt(gt)?,
    };
    let mut trace = InteractionTrace {
        image_id: image_id.to_string(),
        dsc_per_click: Vec::with_capacity(options.budget),
        prompts: vec![match (&prompts.bbox, prompts.points.first()) {
            (Some(b), _) => PromptEvent::Box(*b),
            (None, Some(p)) => PromptEvent::Point(*p),
            (None, None) => return Err(Error::NoPrompt),
        }],
    };
    let mut pred = predict(&prompts)?;
    gt.ensure_same_shape(&pred)?;
    trace.dsc_per_click.push(dsc(&pred, gt)?);
    while trace.len() < options.budget {
        if options.stop_at.is_some_and(|s| trace.last_dsc().unwrap_or(0.0) >= s) {
            break;
        }
        let point = match next_click(&pred, gt, options.mode, rng)? {
            Click::Done => break,
            Click::Point(p) => p,
        };
        prompts = prompts.with_point(point);
        trace.prompts.push(PromptEvent::Point(point));
        pred = predict(&prompts)?;
        gt.ensure_same_shape(&pred)?;
        trace.dsc_per_click.push(dsc(&pred, gt)?);
    }
    Ok((trace, prompts, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn disk(h: usize, w: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
        })
    }

    #[test]
    fn eval_prompt_on_centered_disk() {
        let gt = disk(64, 64, 32.0, 32.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = initial_prompt(&gt, &SamplerConfig::default(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(p, PromptSet::from_point(Point::positive(32, 32)));
    }

    #[test]
    fn zero_jitter_gives_centroid_or_tight_box() {
        let gt = disk(48, 48, 20.0, 25.0, 7.0);
        let cfg = SamplerConfig {
            jitter_fraction: 0.0,
            ..Default::default()
        };
        let tight = gt.bounding_box().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = initial_prompt(&gt, &cfg, Mode::Train, &mut rng).unwrap();
            match (p.points.first(), p.bbox) {
                (Some(pt), None) => assert_eq!((pt.x, pt.y), (20, 25)),
                (None, Some(b)) => assert_eq!(b, tight),
                other => panic!("unexpected prompt {other:?}"),
            }
        }
    }

    #[test]
    fn empty_gt_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = initial_prompt(&BinaryMask::empty(8, 8), &SamplerConfig::default(), Mode::Eval, &mut rng)
            .unwrap_err();
        assert_eq!(err.to_string(), "empty ground truth");
    }

    #[test]
    fn error_map_boundaries() {
        let gt = disk(16, 16, 8.0, 8.0, 4.0);
        let same = compute_error_map(&gt, &gt).unwrap();
        assert!(same.false_positive.is_empty() && same.false_negative.is_empty());
        let full = compute_error_map(&BinaryMask::full(16, 16), &BinaryMask::empty(16, 16)).unwrap();
        assert_eq!(full.false_positive, BinaryMask::full(16, 16));
        assert!(full.false_negative.is_empty());
        assert!(compute_error_map(&gt, &BinaryMask::empty(8, 16)).is_err());
    }

    proptest! {
        #[test]
        fn error_map_partitions_xor(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.5));
            let b = BinaryMask::from_fn(h, w, |_, _| rng.random_bool(0.5));
            let map = compute_error_map(&a, &b).unwrap();
            let xor = (0..h * w).filter(|&i| a.data()[i] != b.data()[i]).count();
            prop_assert_eq!(map.false_positive.count() + map.false_negative.count(), xor);
            prop_assert_eq!(map.false_positive.intersection_count(&map.false_negative), 0);
        }
    }

    #[test]
    fn click_polarity_and_membership() {
        let gt = disk(32, 32, 16.0, 16.0, 8.0);
        let inner = disk(32, 32, 16.0, 16.0, 4.0);
        let outer = disk(32, 32, 16.0, 16.0, 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [Mode::Train, Mode::Eval] {
            let Click::Point(p) = next_click(&inner, &gt, mode, &mut rng).unwrap() else {
                panic!("expected a click")
            };
            assert_eq!(p.label, Label::Positive);
            assert!(gt.get(p.y, p.x) && !inner.get(p.y, p.x));
            let Click::Point(p) = next_click(&outer, &gt, mode, &mut rng).unwrap() else {
                panic!("expected a click")
            };
            assert_eq!(p.label, Label::Negative);
            assert!(outer.get(p.y, p.x) && !gt.get(p.y, p.x));
            assert_eq!(next_click(&gt, &gt, mode, &mut rng).unwrap(), Click::Done);
        }
    }

    #[test]
    fn tie_resolves_to_positive() {
        let gt = BinaryMask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let pred = BinaryMask::new(1, 4, vec![1, 0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let Click::Point(p) = next_click(&pred, &gt, Mode::Eval, &mut rng).unwrap() else {
            panic!()
        };
        assert_eq!((p.x, p.y, p.label), (1, 0, Label::Positive));
    }

    #[test]
    fn eval_click_picks_center_of_largest_component() {
        let gt = BinaryMask::from_fn(20, 20, |y, x| (2..5).contains(&y) && (2..5).contains(&x)
            || (8..17).contains(&y) && (8..17).contains(&x));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let Click::Point(p) = next_click(&BinaryMask::empty(20, 20), &gt, Mode::Eval, &mut rng).unwrap()
        else {
            panic!()
        };
        assert_eq!((p.x, p.y), (12, 12));
    }

    #[test]
    fn perfect_model_session_has_one_click() {
        let gt = disk(32, 32, 16.0, 16.0, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (trace, _, _) = simulate_session(
            |_| Ok(gt.clone()),
            "a",
            &gt,
            &SessionOptions::eval(10),
            &SamplerConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.dsc_per_click, vec![1.0]);
    }

    #[test]
    fn empty_model_session_clicks_inside_gt() {
        let gt = disk(32, 32, 16.0, 16.0, 6.0);
        for mode in [Mode::Train, Mode::Eval] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let options = SessionOptions {
                mode,
                ..SessionOptions::eval(7)
            };
            let cfg = SamplerConfig {
                point_box_probability: 1.0,
                ..Default::default()
            };
            let (trace, prompts, _) = simulate_session(
                |_| Ok(BinaryMask::empty(32, 32)),
                "a",
                &gt,
                &options,
                &cfg,
                &mut rng,
            )
            .unwrap();
            assert_eq!(trace.len(), 7);
            assert_eq!(prompts.points.len(), 7);
            for p in prompts.points {
                assert_eq!(p.label, Label::Positive);
                assert!(gt.get(p.y, p.x));
            }
        }
    }

    #[test]
    fn session_rng_streams_differ_by_id() {
        let a: u64 = session_rng(1, "a").random();
        let b: u64 = session_rng(1, "b").random();
        let a2: u64 = session_rng(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
