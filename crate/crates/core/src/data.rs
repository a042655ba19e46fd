//! Tracklets, manifests, the synthetic tracklet generator, samplers and
//! pixel-level augmentations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mstat_tensor::io::{read_tensor, write_tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MstatError, Result};
use crate::model::CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    /// Raw tensor container (`.mstn`, `[T, 3, H, W]`) or a directory of
    /// frame images; relative paths resolve against the manifest's folder.
    pub path: String,
    pub id: u32,
    pub camera: u32,
    pub frames: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Reads a line-delimited manifest. Frame files are not touched here.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", path.display(), i + 1);
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| MstatError::DataContract(format!("{location}: malformed record: {e}")))?;
        if rec.frames == 0 {
            return Err(MstatError::DataContract(format!("{location}: tracklet has no frames")));
        }
        records.push(rec);
        lines.push(location);
    }
    if records.is_empty() {
        log::warn!("manifest {} has no records; dataset is empty", path.display());
    }
    let train: BTreeSet<u32> = records.iter().filter(|r| r.split == Split::Train).map(|r| r.id).collect();
    if let Some(i) = records.iter().position(|r| r.split != Split::Train && train.contains(&r.id)) {
        return Err(MstatError::DataContract(format!(
            "{}: test identity {} also appears in the train split",
            lines[i], records[i].id
        )));
    }
    Ok(DatasetManifest { base_dir, records })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| MstatError::Config(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Decoded frames of one tracklet, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u32,
    pub camera: u32,
    pub height: usize,
    pub width: usize,
    /// `[T, 3, H, W]` row-major.
    pub pixels: Vec<f32>,
}

impl Tracklet {
    pub fn frame_len(&self) -> usize {
        CHANNELS * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }
}

/// Decodes the frames behind `record`.
pub fn load_tracklet(manifest: &DatasetManifest, record: &ManifestRecord) -> Result<Tracklet> {
    let path = manifest.resolve(record);
    let where_ = || format!("tracklet {} (id {}, camera {})", path.display(), record.id, record.camera);
    let (shape, pixels) = if path.is_dir() {
        load_image_dir(&path)?
    } else {
        let file = File::open(&path).map_err(|e| MstatError::DataContract(format!("{}: {e}", where_())))?;
        let raw = read_tensor(&mut BufReader::new(file))
            .map_err(|e| MstatError::DataContract(format!("{}: unreadable frames: {e}", where_())))?;
        (raw.shape.clone(), raw.into_vec::<f32>())
    };
    if shape.len() != 4 || shape[1] != CHANNELS || shape[0] == 0 {
        return Err(MstatError::DataContract(format!("{}: frames have shape {shape:?}", where_())));
    }
    if shape[0] != record.frames {
        return Err(MstatError::DataContract(format!(
            "{}: manifest says {} frames, found {}",
            where_(),
            record.frames,
            shape[0]
        )));
    }
    Ok(Tracklet {
        id: record.id,
        camera: record.camera,
        height: shape[2],
        width: shape[3],
        pixels,
    })
}

fn load_image_dir(dir: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    let mut dims = None;
    let mut pixels = Vec::new();
    for f in &files {
        let img = image::open(f)
            .map_err(|e| MstatError::DataContract(format!("{}: {e}", f.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *dims.get_or_insert((h, w)) != (h, w) {
            return Err(MstatError::DataContract(format!(
                "{}: frame is {h}x{w}, earlier frames differ",
                f.display()
            )));
        }
        for c in 0..CHANNELS {
            pixels.extend(img.pixels().map(|p| p.0[c] as f32 / 255.0));
        }
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Ok((vec![files.len(), CHANNELS, h, w], pixels))
}

/// Loads every record of the given splits, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Tracklet>> {
    manifest
        .split(split)
        .into_iter()
        .map(|i| load_tracklet(manifest, &manifest.records[i]))
        .collect()
}

/// Recipe for a synthetic re-ID dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    /// The first `train_identities` ids form the train split.
    pub train_identities: usize,
    pub cameras: usize,
    pub tracklets_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Std of per-pixel noise.
    pub jitter: f64,
    /// Largest horizontal drift in pixels over a tracklet.
    pub drift: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 24,
            train_identities: 16,
            cameras: 2,
            tracklets_per_id: 4,
            frames: 16,
            height: 32,
            width: 16,
            jitter: 0.03,
            drift: 2.0,
            occlusion_prob: 0.1,
            seed: 0,
        }
    }
}

/// Stable appearance of one synthetic identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityLook {
    pub upper: [f32; 3],
    pub lower: [f32; 3],
    pub skin: [f32; 3],
    /// Hat, logo, bag and shoes; `None` when absent.
    pub attributes: [Option<[f32; 3]>; 4],
}

impl IdentityLook {
    fn vector(&self) -> Vec<f32> {
        let mut v: Vec<f32> = self.upper.iter().chain(&self.lower).chain(&self.skin).copied().collect();
        for a in &self.attributes {
            v.extend(a.unwrap_or([0.0; 3]).iter().map(|c| c + a.map_or(0.0, |_| 1.0)));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CameraLook {
    tint: [f32; 3],
    offset: f32,
    shift: f32,
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Body regions in a 32x16 reference frame: `(row0, row1, col0, col1)`.
const HEAD: (f32, f32, f32, f32) = (2.0, 8.0, 6.0, 10.0);
const TORSO: (f32, f32, f32, f32) = (8.0, 19.0, 4.0, 12.0);
const LEGS: (f32, f32, f32, f32) = (19.0, 30.0, 5.0, 11.0);
const ATTRIBUTE_REGIONS: [(f32, f32, f32, f32); 4] = [
    (0.0, 3.0, 5.0, 11.0),
    (10.0, 14.0, 6.0, 10.0),
    (11.0, 18.0, 11.0, 15.0),
    (29.0, 32.0, 4.0, 12.0),
];

fn validate_spec(spec: &SynthSpec) -> Result<()> {
    if spec.identities < 2 || spec.cameras < 2 {
        return Err(MstatError::Config("synthetic data needs at least 2 identities and 2 cameras".into()));
    }
    if spec.train_identities > spec.identities {
        return Err(MstatError::Config("more train identities than identities".into()));
    }
    if spec.tracklets_per_id == 0 || spec.frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(MstatError::Config("synthetic tracklets need frames and pixels".into()));
    }
    if !(0.0..=1.0).contains(&spec.occlusion_prob) || !(spec.jitter >= 0.0) || !(spec.drift >= 0.0) {
        return Err(MstatError::Config("bad synthetic noise parameters".into()));
    }
    Ok(())
}

/// Identity appearances; pairwise distinct by construction.
pub fn synth_identities(spec: &SynthSpec) -> Result<Vec<IdentityLook>> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut looks: Vec<IdentityLook> = Vec::with_capacity(spec.identities);
    let mut attempts = 0;
    while looks.len() < spec.identities {
        attempts += 1;
        if attempts > 1000 * spec.identities {
            return Err(MstatError::Config("could not draw distinct identities".into()));
        }
        let look = IdentityLook {
            upper: color(&mut rng),
            lower: color(&mut rng),
            skin: [
                rng.random_range(0.5..0.9),
                rng.random_range(0.35..0.7),
                rng.random_range(0.25..0.55),
            ],
            attributes: std::array::from_fn(|_| rng.random_bool(0.5).then(|| color(&mut rng))),
        };
        let v = look.vector();
        if looks.iter().all(|o| distance(&o.vector(), &v) > 0.35) {
            looks.push(look);
        }
    }
    Ok(looks)
}

fn paint(frame: &mut [f32], h: usize, w: usize, region: (f32, f32, f32, f32), dx: f32, dy: f32, rgb: [f32; 3]) {
    let (sy, sx) = (h as f32 / 32.0, w as f32 / 16.0);
    let r0 = ((region.0 + dy) * sy).round().max(0.0) as usize;
    let r1 = (((region.1 + dy) * sy).round().max(0.0) as usize).min(h);
    let c0 = ((region.2 + dx) * sx).round().max(0.0) as usize;
    let c1 = (((region.3 + dx) * sx).round().max(0.0) as usize).min(w);
    for (c, v) in rgb.iter().enumerate() {
        for r in r0..r1 {
            for col in c0..c1 {
                frame[(c * h + r) * w + col] = *v;
            }
        }
    }
}

fn render_tracklet(spec: &SynthSpec, look: &IdentityLook, cam: &CameraLook, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = (spec.height, spec.width);
    let fl = CHANNELS * h * w;
    let noise = Normal::new(0.0, spec.jitter.max(1e-12)).expect("finite std");
    let background = color(rng).map(|c| 0.3 + 0.4 * c);
    let start = rng.random_range(-1.0..=1.0f32);
    let drift = rng.random_range(-1.0..=1.0f32) * spec.drift as f32;
    let mut out = Vec::with_capacity(spec.frames * fl);
    for t in 0..spec.frames {
        let frac = if spec.frames > 1 { t as f32 / (spec.frames - 1) as f32 } else { 0.0 };
        let dx = cam.shift + start + drift * frac;
        let dy = rng.random_range(-0.5..=0.5f32);
        let mut frame = vec![0.0f32; fl];
        for c in 0..CHANNELS {
            frame[c * h * w..(c + 1) * h * w].fill(background[c]);
        }
        paint(&mut frame, h, w, TORSO, dx, dy, look.upper);
        paint(&mut frame, h, w, LEGS, dx, dy, look.lower);
        paint(&mut frame, h, w, HEAD, dx, dy, look.skin);
        for (attr, region) in look.attributes.iter().zip(ATTRIBUTE_REGIONS) {
            if let Some(rgb) = attr {
                paint(&mut frame, h, w, region, dx, dy, *rgb);
            }
        }
        if rng.random_bool(spec.occlusion_prob) {
            let top = rng.random_range(0.0..24.0f32);
            let gray = rng.random_range(0.2..0.8f32);
            paint(&mut frame, h, w, (top, top + 8.0, -4.0, 20.0), 0.0, 0.0, [gray; 3]);
        }
        for c in 0..CHANNELS {
            for v in &mut frame[c * h * w..(c + 1) * h * w] {
                let n = if spec.jitter > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                *v = (*v * cam.tint[c] + cam.offset + n).clamp(0.0, 1.0);
            }
        }
        out.extend(frame);
    }
    out
}

/// Renders the full synthetic dataset in memory. Record paths are the
/// file names [`generate_synthetic_tracklets`] would write.
pub fn synthesize(spec: &SynthSpec) -> Result<Vec<(ManifestRecord, Tracklet)>> {
    let looks = synth_identities(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_cafe);
    let cams: Vec<CameraLook> = (0..spec.cameras)
        .map(|_| CameraLook {
            tint: [
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
                rng.random_range(0.85..1.15),
            ],
            offset: rng.random_range(-0.05..0.05),
            shift: rng.random_range(-1.0..=1.0),
        })
        .collect();
    let mut out = Vec::new();
    for (id, look) in looks.iter().enumerate() {
        for k in 0..spec.tracklets_per_id {
            let camera = k % spec.cameras;
            let pixels = render_tracklet(spec, look, &cams[camera], &mut rng);
            let split = if id < spec.train_identities {
                Split::Train
            } else if camera == 0 {
                Split::Query
            } else {
                Split::Gallery
            };
            let record = ManifestRecord {
                path: format!("tracklets/id{id:03}_c{camera}_t{k:02}.mstn"),
                id: id as u32,
                camera: camera as u32,
                frames: spec.frames,
                split,
            };
            let tracklet = Tracklet {
                id: id as u32,
                camera: camera as u32,
                height: spec.height,
                width: spec.width,
                pixels,
            };
            out.push((record, tracklet));
        }
    }
    Ok(out)
}

/// Writes the synthetic dataset under `out_dir` (one container per
/// tracklet plus `manifest.jsonl`) and returns the manifest.
pub fn generate_synthetic_tracklets(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let items = synthesize(spec)?;
    fs::create_dir_all(out_dir.join("tracklets"))?;
    let mut records = Vec::with_capacity(items.len());
    for (rec, t) in items {
        let mut w = BufWriter::new(File::create(out_dir.join(&rec.path))?);
        write_tensor(&mut w, &[t.len(), CHANNELS, t.height, t.width], &t.pixels)?;
        w.flush()?;
        records.push(rec);
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(DatasetManifest {
        base_dir: out_dir.to_path_buf(),
        records,
    })
}

/// Frame positions for a training clip of `clip` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameSampling {
    /// One random frame from each of `clip` equal chunks.
    #[default]
    Chunked,
    /// `clip` random frames, sorted.
    Uniform,
}

pub fn sample_clip_frames(len: usize, clip: usize, mode: FrameSampling, rng: &mut impl Rng) -> Vec<usize> {
    if len < clip {
        return sample_test_clip(len, clip, rng);
    }
    match mode {
        FrameSampling::Chunked => (0..clip)
            .map(|i| rng.random_range(i * len / clip..(i + 1) * len / clip))
            .collect(),
        FrameSampling::Uniform => {
            let mut idx = rand::seq::index::sample(rng, len, clip).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Frame positions for an evaluation clip. Long tracklets are chunk
/// sampled; short ones repeat cyclically from a random start.
pub fn sample_test_clip(len: usize, clip: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    if len >= clip {
        return (0..clip)
            .map(|i| rng.random_range(i * len / clip..(i + 1) * len / clip))
            .collect();
    }
    let start = rng.random_range(0..len);
    (0..clip).map(|i| (start + i) % len).collect()
}

/// Pixel-level clip augmentation, one draw per clip shared by its frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelAugment {
    pub flip_prob: f64,
    pub crop_prob: f64,
    /// Zero padding added on every side before cropping back.
    pub crop_padding: usize,
    pub erase_prob: f64,
}

impl Default for PixelAugment {
    fn default() -> Self {
        PixelAugment {
            flip_prob: 0.5,
            crop_prob: 0.5,
            crop_padding: 10,
            erase_prob: 0.5,
        }
    }
}

impl PixelAugment {
    pub fn none() -> Self {
        PixelAugment {
            flip_prob: 0.0,
            crop_prob: 0.0,
            crop_padding: 0,
            erase_prob: 0.0,
        }
    }

    /// Augments `frames: [T, 3, H, W]` in place.
    pub fn apply(&self, frames: &mut [f32], h: usize, w: usize, rng: &mut impl Rng) {
        let fl = CHANNELS * h * w;
        let flip = rng.random_bool(self.flip_prob);
        let crop = rng.random_bool(self.crop_prob) && self.crop_padding > 0;
        let (oy, ox) = if crop {
            let p = self.crop_padding as i64;
            (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
        } else {
            (0, 0)
        };
        let erase = rng.random_bool(self.erase_prob).then(|| erase_box(h, w, rng));
        let fill: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        for frame in frames.chunks_mut(fl) {
            let src = frame.to_vec();
            for c in 0..CHANNELS {
                for r in 0..h {
                    for col in 0..w {
                        let sc = if flip { w - 1 - col } else { col } as isize + ox;
                        let sr = r as isize + oy;
                        let v = if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                            0.0
                        } else {
                            src[(c * h + sr as usize) * w + sc as usize]
                        };
                        frame[(c * h + r) * w + col] = v;
                    }
                }
                if let Some((r0, r1, c0, c1)) = erase {
                    for r in r0..r1 {
                        frame[(c * h + r) * w + c0..(c * h + r) * w + c1].fill(fill[c]);
                    }
                }
            }
        }
    }
}

/// Random erasing rectangle: 2% to 40% of the area, aspect 0.3 to 3.3.
fn erase_box(h: usize, w: usize, rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    for _ in 0..100 {
        let area = rng.random_range(0.02..0.4) * (h * w) as f64;
        let aspect = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh > 0 && ew > 0 && eh < h && ew < w {
            let r0 = rng.random_range(0..=h - eh);
            let c0 = rng.random_range(0..=w - ew);
            return (r0, r0 + eh, c0, c0 + ew);
        }
    }
    (0, 0, 0, 0)
}

/// Maps raw `[0, 1]` pixels to the model's input range.
pub fn normalize_pixels(x: f32) -> f32 {
    (x - 0.5) / 0.25
}

/// A batch of training clips, two per identity from different cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// `[B, L, 3, H, W]` normalized pixels.
    pub clips: Vec<f32>,
    pub shape: [usize; 5],
    /// Class index per clip.
    pub labels: Vec<usize>,
    /// `(tracklet index, frame indices)` per clip.
    pub sources: Vec<(usize, Vec<usize>)>,
}

/// Training tracklets indexed by identity.
pub struct TrainSet {
    pub tracklets: Vec<Tracklet>,
    /// Sorted identity list; the class index is the position here.
    pub ids: Vec<u32>,
    by_id: BTreeMap<u32, Vec<usize>>,
}

impl TrainSet {
    pub fn new(tracklets: Vec<Tracklet>) -> Result<Self> {
        if tracklets.is_empty() {
            return Err(MstatError::DataContract("train split is empty".into()));
        }
        let (h, w) = (tracklets[0].height, tracklets[0].width);
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, t) in tracklets.iter().enumerate() {
            if (t.height, t.width) != (h, w) {
                return Err(MstatError::DataContract(format!(
                    "tracklet {i} (id {}) is {}x{}, expected {h}x{w}",
                    t.id, t.height, t.width
                )));
            }
            by_id.entry(t.id).or_default().push(i);
        }
        for (id, idx) in &by_id {
            let cams: BTreeSet<u32> = idx.iter().map(|&i| tracklets[i].camera).collect();
            if cams.len() < 2 {
                return Err(MstatError::DataContract(format!(
                    "identity {id} has tracklets from only one camera"
                )));
            }
        }
        Ok(TrainSet {
            ids: by_id.keys().copied().collect(),
            tracklets,
            by_id,
        })
    }

    pub fn classes(&self) -> usize {
        self.ids.len()
    }

    /// Identity groups for one epoch: all ids shuffled, cut into groups of
    /// `ids_per_batch`; a short tail group is dropped.
    pub fn epoch_plan(&self, ids_per_batch: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
        if ids_per_batch < 2 || ids_per_batch > self.ids.len() {
            return Err(MstatError::Config(format!(
                "ids per batch must be in [2, {}], got {ids_per_batch}",
                self.ids.len()
            )));
        }
        let mut classes: Vec<usize> = (0..self.ids.len()).collect();
        classes.shuffle(rng);
        Ok(classes.chunks_exact(ids_per_batch).map(<[usize]>::to_vec).collect())
    }

    /// Two clips per class in `classes`, drawn from different cameras.
    pub fn sample_batch(
        &self,
        classes: &[usize],
        clip: usize,
        sampling: FrameSampling,
        augment: &PixelAugment,
        rng: &mut impl Rng,
    ) -> Result<TrainBatch> {
        let t0 = &self.tracklets[0];
        let (h, w) = (t0.height, t0.width);
        let fl = t0.frame_len();
        let mut clips = Vec::with_capacity(2 * classes.len() * clip * fl);
        let mut labels = Vec::with_capacity(2 * classes.len());
        let mut sources = Vec::with_capacity(2 * classes.len());
        for &class in classes {
            let id = *self
                .ids
                .get(class)
                .ok_or_else(|| MstatError::Usage(format!("class {class} out of range")))?;
            let idx = &self.by_id[&id];
            let cams: Vec<u32> = idx
                .iter()
                .map(|&i| self.tracklets[i].camera)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let pair: Vec<u32> = cams.choose_multiple(rng, 2).copied().collect();
            for cam in pair {
                let options: Vec<usize> = idx.iter().copied().filter(|&i| self.tracklets[i].camera == cam).collect();
                let ti = *options.choose(rng).expect("camera has a tracklet");
                let t = &self.tracklets[ti];
                let frames = sample_clip_frames(t.len(), clip, sampling, rng);
                let mut buf: Vec<f32> = frames.iter().flat_map(|&f| t.frame(f).iter().copied()).collect();
                augment.apply(&mut buf, h, w, rng);
                clips.extend(buf.into_iter().map(normalize_pixels));
                labels.push(class);
                sources.push((ti, frames));
            }
        }
        Ok(TrainBatch {
            clips,
            shape: [labels.len(), clip, CHANNELS, h, w],
            labels,
            sources,
        })
    }
}

/// Frame positions behind [`test_clip`].
pub fn test_clip_frames(len: usize, clip: usize, seed: u64) -> Vec<usize> {
    sample_test_clip(len, clip, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Evaluation clip of one tracklet, normalized `[T, 3, H, W]`.
pub fn test_clip(t: &Tracklet, clip: usize, seed: u64) -> Vec<f32> {
    test_clip_frames(t.len(), clip, seed)
        .into_iter()
        .flat_map(|f| t.frame(f).iter().map(|&v| normalize_pixels(v)))
        .collect()
}
