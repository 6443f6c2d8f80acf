//! Loop-level tracking with click interventions: segment the first frame interactively,
//! propagate with a tracker, and correct whenever tracked DSC falls below a floor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid, PromptSet};
use crate::io::{read_image, read_mask, write_atomic, write_image, write_mask, Sample};
use crate::metrics::{dsc, OracleModel, SegmentationModel};
use crate::prompting::{
    next_click, session_rng, simulate_session, Click, Mode, SamplerConfig, SessionOptions,
};

#[derive(Debug, Clone)]
pub struct CineLoop {
    view: String,
    frames: Vec<ImageGrid>,
    /// Object id and one mask per frame, in a stable object order.
    objects: Vec<(String, Vec<BinaryMask>)>,
}

impl CineLoop {
    pub fn new(
        view: String,
        frames: Vec<ImageGrid>,
        objects: Vec<(String, Vec<BinaryMask>)>,
    ) -> Result<Self> {
        let first = frames.first().ok_or(Error::Empty("cine loop frames"))?.shape();
        if objects.is_empty() {
            return Err(Error::Empty("cine loop objects"));
        }
        for f in &frames {
            if f.shape() != first {
                return Err(Error::ShapeMismatch {
                    expected: first,
                    actual: f.shape(),
                });
            }
        }
        for (id, masks) in &objects {
            if masks.len() != frames.len() {
                return Err(Error::Config(format!(
                    "object {id} has {} masks for {} frames",
                    masks.len(),
                    frames.len()
                )));
            }
            for m in masks {
                if m.shape() != first {
                    return Err(Error::ShapeMismatch {
                        expected: first,
                        actual: m.shape(),
                    });
                }
            }
        }
        Ok(Self {
            view,
            frames,
            objects,
        })
    }

    pub fn view(&self) -> &str {
        &self.view
    }

    pub fn frames(&self) -> &[ImageGrid] {
        &self.frames
    }

    pub fn objects(&self) -> &[(String, Vec<BinaryMask>)] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_masks(&self, t: usize) -> Vec<BinaryMask> {
        self.objects.iter().map(|(_, m)| m[t].clone()).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoopManifest {
    view: String,
    frames: usize,
    objects: Vec<String>,
}

/// Layout: `loop.json`, `frames/NNN.png`, `masks/<object>/NNN.png`.
pub fn save_cine_loop(cine: &CineLoop, dir: &Path) -> Result<()> {
    for (t, frame) in cine.frames.iter().enumerate() {
        write_image(frame, &dir.join(format!("frames/{t:03}.png")))?;
    }
    for (id, masks) in &cine.objects {
        for (t, m) in masks.iter().enumerate() {
            write_mask(m, &dir.join(format!("masks/{id}/{t:03}.png")))?;
        }
    }
    let manifest = LoopManifest {
        view: cine.view.clone(),
        frames: cine.frames.len(),
        objects: cine.objects.iter().map(|(id, _)| id.clone()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("loop manifest serializes");
    write_atomic(&dir.join("loop.json"), text.as_bytes())
}

pub fn load_cine_loop(dir: &Path) -> Result<CineLoop> {
    let path = dir.join("loop.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: LoopManifest = serde_json::from_str(&text)
        .map_err(|e| Error::data(&path, format!("malformed loop manifest: {e}")))?;
    let frames = (0..manifest.frames)
        .map(|t| read_image(&dir.join(format!("frames/{t:03}.png"))))
        .collect::<Result<Vec<_>>>()?;
    let objects = manifest
        .objects
        .iter()
        .map(|id| {
            let masks = (0..manifest.frames)
                .map(|t| read_mask(&dir.join(format!("masks/{id}/{t:03}.png"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((id.clone(), masks))
        })
        .collect::<Result<Vec<_>>>()?;
    CineLoop::new(manifest.view, frames, objects).map_err(|e| Error::data(dir, e.to_string()))
}

/// Mask propagation between consecutive frames; masks are in the loop's object order.
pub trait TrackerAdapter: Send {
    fn init(&mut self, frame: &ImageGrid, masks: &[BinaryMask]) -> Result<()>;
    fn propagate(&mut self, frame: &ImageGrid) -> Result<Vec<BinaryMask>>;
}

/// Copies the previous masks forward.
#[derive(Debug, Default)]
pub struct PreviousMaskTracker {
    masks: Vec<BinaryMask>,
}

impl TrackerAdapter for PreviousMaskTracker {
    fn init(&mut self, _frame: &ImageGrid, masks: &[BinaryMask]) -> Result<()> {
        self.masks = masks.to_vec();
        Ok(())
    }

    fn propagate(&mut self, _frame: &ImageGrid) -> Result<Vec<BinaryMask>> {
        Ok(self.masks.clone())
    }
}

/// Shifts each mask by the integer translation that maximizes normalized cross-correlation
/// of the surrounding patch between consecutive frames.
#[derive(Debug)]
pub struct ShiftTracker {
    pub max_shift: i64,
    /// Patch margin around each mask's bounding box.
    pub margin: usize,
    frame: Option<ImageGrid>,
    masks: Vec<BinaryMask>,
    last_offsets: Vec<(i64, i64)>,
}

impl Default for ShiftTracker {
    fn default() -> Self {
        Self {
            max_shift: 8,
            margin: 4,
            frame: None,
            masks: Vec::new(),
            last_offsets: Vec::new(),
        }
    }
}

impl ShiftTracker {
    /// `(dx, dy)` per object from the most recent `propagate`.
    pub fn last_offsets(&self) -> &[(i64, i64)] {
        &self.last_offsets
    }

    fn estimate(&self, prev: &ImageGrid, next: &ImageGrid, mask: &BinaryMask) -> (i64, i64) {
        let Some(b) = mask.bounding_box() else {
            return (0, 0);
        };
        let (h, w) = (prev.height() as i64, prev.width() as i64);
        let m = self.margin as i64;
        let (x0, y0) = ((b.x0 as i64 - m).max(0), (b.y0 as i64 - m).max(0));
        let (x1, y1) = ((b.x1 as i64 + m).min(w), (b.y1 as i64 + m).min(h));
        let mut best: (i64, i64) = (0, 0);
        let mut best_score = f64::NEG_INFINITY;
        for dy in -self.max_shift..=self.max_shift {
            for dx in -self.max_shift..=self.max_shift {
                let mut a = Vec::new();
                let mut c = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        a.push(prev.get(y as usize, x as usize) as f64);
                        c.push(next.get(ny as usize, nx as usize) as f64);
                    }
                }
                let score = ncc(&a, &c);
                // strict improvement keeps the smallest-magnitude scan order on ties
                if score > best_score + 1e-12
                    || ((score - best_score).abs() <= 1e-12
                        && dx.abs() + dy.abs() < best.0.abs() + best.1.abs())
                {
                    best_score = score;
                    best = (dx, dy);
                }
            }
        }
        best
    }
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

/// Translates a mask by `(dx, dy)`; pixels shifted past the border are dropped.
pub fn shift_mask(mask: &BinaryMask, dx: i64, dy: i64) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |y, x| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 && mask.get(sy as usize, sx as usize)
    })
}

impl TrackerAdapter for ShiftTracker {
    fn init(&mut self, frame: &ImageGrid, masks: &[BinaryMask]) -> Result<()> {
        self.frame = Some(frame.clone());
        self.masks = masks.to_vec();
        Ok(())
    }

    fn propagate(&mut self, frame: &ImageGrid) -> Result<Vec<BinaryMask>> {
        let prev = self
            .frame
            .take()
            .ok_or_else(|| Error::Adapter("tracker used before init".into()))?;
        let offsets: Vec<_> = self
            .masks
            .iter()
            .map(|m| self.estimate(&prev, frame, m))
            .collect();
        self.masks = self
            .masks
            .iter()
            .zip(&offsets)
            .map(|(m, &(dx, dy))| shift_mask(m, dx, dy))
            .collect();
        self.last_offsets = offsets;
        self.frame = Some(frame.clone());
        Ok(self.masks.clone())
    }
}

/// Emits precomputed masks for each propagated frame, ignoring images.
pub struct ScriptedTracker {
    script: Vec<Vec<BinaryMask>>,
    next: usize,
}

impl ScriptedTracker {
    /// `script[t]` holds the masks returned for frame `t`; entry 0 is unused.
    pub fn new(script: Vec<Vec<BinaryMask>>) -> Self {
        Self { script, next: 1 }
    }
}

impl TrackerAdapter for ScriptedTracker {
    fn init(&mut self, _frame: &ImageGrid, _masks: &[BinaryMask]) -> Result<()> {
        Ok(())
    }

    fn propagate(&mut self, _frame: &ImageGrid) -> Result<Vec<BinaryMask>> {
        let out = self
            .script
            .get(self.next)
            .cloned()
            .ok_or_else(|| Error::Adapter(format!("script has no frame {}", self.next)))?;
        self.next += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    /// DSC of the tracker output; `None` on the first frame.
    pub tracked_dsc: Option<f64>,
    /// DSC after any intervention.
    pub final_dsc: f64,
    pub clicks: usize,
    pub intervened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTracking {
    pub object_id: String,
    pub interventions_per_loop: f64,
    /// Mean of `floor - tracked DSC` over interventions; 0 when there were none.
    pub mean_dice_drop_before_intervention: f64,
    pub clicks_per_frame: f64,
    pub clicks_per_loop: f64,
    pub first_frame_clicks: usize,
    pub intervention_clicks: usize,
    pub drops: Vec<f64>,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub view: String,
    pub frame_count: usize,
    pub dsc_floor: f64,
    pub objects: Vec<ObjectTracking>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub dsc_floor: f64,
    /// Click budget for the first frame and for each intervention.
    pub click_budget: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            dsc_floor: 0.9,
            click_budget: 10,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Corrective clicks starting from `start`; returns the final mask and the clicks spent.
pub fn correct_mask(
    model: &dyn SegmentationModel,
    image_id: &str,
    image: &ImageGrid,
    start: &BinaryMask,
    gt: &BinaryMask,
    floor: f64,
    budget: usize,
) -> Result<(BinaryMask, usize)> {
    let mut session = model.open(image_id, image)?;
    let mut rng = session_rng(0, image_id);
    let mut prompts = PromptSet::default();
    let mut pred = start.clone();
    let mut clicks = 0;
    while clicks < budget && dsc(&pred, gt)? < floor {
        match next_click(&pred, gt, Mode::Eval, &mut rng)? {
            Click::Done => break,
            Click::Point(p) => prompts.points.push(p),
        }
        clicks += 1;
        pred = session.predict(&prompts)?;
        gt.ensure_same_shape(&pred)?;
    }
    Ok((pred, clicks))
}

/// Image id `run_loop` uses for an object at a frame.
pub fn frame_image_id(view: &str, object_id: &str, frame: usize) -> String {
    format!("{view}/{object_id}/{frame:03}")
}

/// Oracle answering every (object, frame) of the loop with its ground truth.
pub fn loop_oracle(cine: &CineLoop) -> OracleModel {
    let samples: Vec<Sample> = cine
        .objects
        .iter()
        .flat_map(|(id, masks)| {
            masks.iter().enumerate().map(move |(t, m)| Sample {
                id: frame_image_id(&cine.view, id, t),
                image: cine.frames[t].clone(),
                gt: m.clone(),
            })
        })
        .collect();
    OracleModel::new(&samples)
}

pub fn run_loop(
    model: &dyn SegmentationModel,
    tracker: &mut dyn TrackerAdapter,
    cine: &CineLoop,
    config: &TrackingConfig,
) -> Result<TrackingReport> {
    if !(0.0..1.0).contains(&config.dsc_floor) {
        return Err(Error::Config("dsc_floor must lie in [0, 1)".into()));
    }
    if config.click_budget == 0 {
        return Err(Error::Config("click budget must be at least 1".into()));
    }
    let shape = cine.frames[0].shape();
    let floor = config.dsc_floor;
    let n_obj = cine.objects.len();
    let mut records: Vec<Vec<FrameRecord>> = vec![Vec::new(); n_obj];
    let mut drops: Vec<Vec<f64>> = vec![Vec::new(); n_obj];
    let mut first_clicks = vec![0usize; n_obj];
    let mut later_clicks = vec![0usize; n_obj];

    let options = SessionOptions {
        stop_at: Some(floor),
        ..SessionOptions::eval(config.click_budget)
    };
    let mut current = Vec::with_capacity(n_obj);
    for (k, (id, masks)) in cine.objects.iter().enumerate() {
        let image_id = frame_image_id(&cine.view, id, 0);
        let mut session = model.open(&image_id, &cine.frames[0])?;
        let mut rng = session_rng(config.seed, &image_id);
        let (trace, _, mask) = simulate_session(
            |p| session.predict(p),
            &image_id,
            &masks[0],
            &options,
            &config.sampler,
            &mut rng,
        )?;
        first_clicks[k] = trace.len();
        records[k].push(FrameRecord {
            frame: 0,
            tracked_dsc: None,
            final_dsc: trace.last_dsc().expect("non-empty trace"),
            clicks: trace.len(),
            intervened: false,
        });
        current.push(mask);
    }
    tracker.init(&cine.frames[0], &current)?;

    for t in 1..cine.len() {
        let frame = &cine.frames[t];
        let tracked = tracker.propagate(frame)?;
        if tracked.len() != n_obj {
            return Err(Error::Adapter(format!(
                "tracker returned {} masks for {n_obj} objects at frame {t}",
                tracked.len()
            )));
        }
        for m in &tracked {
            if m.shape() != shape {
                return Err(Error::TrackerShape {
                    frame: t,
                    expected: shape,
                    actual: m.shape(),
                });
            }
        }
        let mut reinit = false;
        current = Vec::with_capacity(n_obj);
        for (k, (id, masks)) in cine.objects.iter().enumerate() {
            let gt = &masks[t];
            let tracked_dsc = dsc(&tracked[k], gt)?;
            if tracked_dsc < floor {
                drops[k].push(floor - tracked_dsc);
                let image_id = frame_image_id(&cine.view, id, t);
                let (fixed, clicks) = correct_mask(
                    model,
                    &image_id,
                    frame,
                    &tracked[k],
                    gt,
                    floor,
                    config.click_budget,
                )?;
                later_clicks[k] += clicks;
                records[k].push(FrameRecord {
                    frame: t,
                    tracked_dsc: Some(tracked_dsc),
                    final_dsc: dsc(&fixed, gt)?,
                    clicks,
                    intervened: true,
                });
                current.push(fixed);
                reinit = true;
            } else {
                records[k].push(FrameRecord {
                    frame: t,
                    tracked_dsc: Some(tracked_dsc),
                    final_dsc: tracked_dsc,
                    clicks: 0,
                    intervened: false,
                });
                current.push(tracked[k].clone());
            }
        }
        if reinit {
            tracker.init(frame, &current)?;
        }
    }

    let n = cine.len() as f64;
    let objects = cine
        .objects
        .iter()
        .enumerate()
        .map(|(k, (id, _))| {
            let total = first_clicks[k] + later_clicks[k];
            let d = &drops[k];
            ObjectTracking {
                object_id: id.clone(),
                interventions_per_loop: d.len() as f64,
                mean_dice_drop_before_intervention: if d.is_empty() {
                    0.0
                } else {
                    d.iter().sum::<f64>() / d.len() as f64
                },
                clicks_per_frame: total as f64 / n,
                clicks_per_loop: total as f64,
                first_frame_clicks: first_clicks[k],
                intervention_clicks: later_clicks[k],
                drops: d.clone(),
                frames: std::mem::take(&mut records[k]),
            }
        })
        .collect();
    Ok(TrackingReport {
        view: cine.view.clone(),
        frame_count: cine.len(),
        dsc_floor: floor,
        objects,
    })
}

/// Per-(view, object) means across subjects, with field names mirroring the published table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub view: String,
    pub object_id: String,
    pub subjects: usize,
    #[serde(rename = "Avg. num of interventions")]
    pub interventions: f64,
    /// Averaged over subjects that needed at least one intervention.
    #[serde(rename = "Avg. drop of DSC before interventions")]
    pub drop: f64,
    #[serde(rename = "Avg. num of clicks per frame")]
    pub clicks_per_frame: f64,
    #[serde(rename = "Avg. num of clicks per loop")]
    pub clicks_per_loop: f64,
}

pub fn aggregate_tracking(reports: &[TrackingReport]) -> Result<Vec<TrackingSummary>> {
    if reports.is_empty() {
        return Err(Error::Empty("tracking reports"));
    }
    let mut groups: BTreeMap<(String, String), Vec<&ObjectTracking>> = BTreeMap::new();
    for r in reports {
        for o in &r.objects {
            groups
                .entry((r.view.clone(), o.object_id.clone()))
                .or_default()
                .push(o);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((view, object_id), items)| {
            let n = items.len() as f64;
            let mean = |f: fn(&ObjectTracking) -> f64| items.iter().map(|o| f(o)).sum::<f64>() / n;
            let with_drops: Vec<f64> = items
                .iter()
                .filter(|o| !o.drops.is_empty())
                .map(|o| o.mean_dice_drop_before_intervention)
                .collect();
            TrackingSummary {
                view,
                object_id,
                subjects: items.len(),
                interventions: mean(|o| o.interventions_per_loop),
                drop: if with_drops.is_empty() {
                    0.0
                } else {
                    with_drops.iter().sum::<f64>() / with_drops.len() as f64
                },
                clicks_per_frame: mean(|o| o.clicks_per_frame),
                clicks_per_loop: mean(|o| o.clicks_per_loop),
            }
        })
        .collect())
}
