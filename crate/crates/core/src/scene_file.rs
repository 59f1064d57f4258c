//! Binary scene files and plain-text manifests.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! header   "BGTF" | version u32 = 1
//!          | n_proposals u32 | n_pairs u32 | n_gt u32 | n_triplets u32
//!          | roi_dim u32 = 2048 | class_dim u32 = 151 | spatial_dim u32 = 4 | union_dim u32 = 2048
//! proposal box f32[4] | roi f32[2048] | class_scores f32[151] | detector_label u32 | confidence f32
//! pair     subject u32 | object u32 | union f32[2048]
//! gt       box f32[4] | label u32
//! triplet  subject u32 | predicate u32 | object u32
//! ```
//!
//! Reals are stored as `f32` and widened to `f64` on load, so a round trip is
//! exact for any value representable in single precision.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scene::{
    BoundingBox, ObjectProposal, PairFeature, Scene, Triplet, NUM_OBJECT_CLASSES, ROI_DIM, SPATIAL_DIM, UNION_DIM,
};
use crate::tensor::Tensor;

pub const SCENE_MAGIC: &[u8; 4] = b"BGTF";
pub const SCENE_VERSION: u32 = 1;
const HEADER_DIMS: [u32; 4] = [
    ROI_DIM as u32,
    NUM_OBJECT_CLASSES as u32,
    SPATIAL_DIM as u32,
    UNION_DIM as u32,
];

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s(&mut self, vals: &[f64]) {
        for &v in vals {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Serializes a scene to the binary layout.
pub fn encode_scene(scene: &Scene) -> Result<Vec<u8>> {
    scene.validate()?;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(SCENE_MAGIC);
    w.u32(SCENE_VERSION as usize)?;
    let a = &scene.annotation;
    for n in [
        scene.proposals.len(),
        scene.pairs.len(),
        a.gt_boxes.len(),
        a.gt_triplets.len(),
    ] {
        w.u32(n)?;
    }
    for d in HEADER_DIMS {
        w.u32(d as usize)?;
    }
    for p in &scene.proposals {
        w.f32s(&p.bbox.as_array());
        w.f32s(p.roi_feature.data());
        w.f32s(p.class_scores.data());
        w.u32(p.detector_label)?;
        w.f32s(&[p.detector_confidence]);
    }
    for pf in &scene.pairs {
        w.u32(pf.subject_index)?;
        w.u32(pf.object_index)?;
        w.f32s(pf.union_feature.data());
    }
    for (b, &l) in a.gt_boxes.iter().zip(&a.gt_labels) {
        w.f32s(&b.as_array());
        w.u32(l)?;
    }
    for t in &a.gt_triplets {
        w.u32(t.subject)?;
        w.u32(t.predicate)?;
        w.u32(t.object)?;
    }
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let b = self.take(4 * n, what)?;
        let vals: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start as u64,
                message: format!("non-finite value in {what}"),
            });
        }
        Ok(vals)
    }

    fn bbox(&mut self, what: &str) -> Result<BoundingBox> {
        let start = self.pos;
        let v = self.f32s(4, what)?;
        BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Format {
            offset: start as u64,
            message: format!("{what}: {e}"),
        })
    }
}

/// Parses the binary layout; errors name the byte offset where parsing failed.
pub fn decode_scene(buf: &[u8]) -> Result<Scene> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != SCENE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {SCENE_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != SCENE_VERSION as usize {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n_props = r.u32("header")?;
    let n_pairs = r.u32("header")?;
    let n_gt = r.u32("header")?;
    let n_trip = r.u32("header")?;
    for expected in HEADER_DIMS {
        let got = r.u32("header dims")?;
        if got != expected as usize {
            return Err(Error::Format {
                offset: (r.pos - 4) as u64,
                message: format!("header dimension {got}, expected {expected}"),
            });
        }
    }

    let mut scene = Scene::default();
    for _ in 0..n_props {
        let start = r.pos;
        let bbox = r.bbox("proposal box")?;
        let roi = r.f32s(ROI_DIM, "roi feature")?;
        let scores = r.f32s(NUM_OBJECT_CLASSES, "class scores")?;
        let detector_label = r.u32("detector label")?;
        let detector_confidence = r.f32s(1, "detector confidence")?[0];
        let p = ObjectProposal {
            bbox,
            roi_feature: Tensor::vector(roi)?,
            class_scores: Tensor::vector(scores)?,
            detector_label,
            detector_confidence,
        };
        p.validate().map_err(|e| Error::Format {
            offset: start as u64,
            message: format!("proposal record: {e}"),
        })?;
        scene.proposals.push(p);
    }
    for _ in 0..n_pairs {
        let subject_index = r.u32("pair subject")?;
        let object_index = r.u32("pair object")?;
        let union = r.f32s(UNION_DIM, "union feature")?;
        scene.pairs.push(PairFeature {
            subject_index,
            object_index,
            union_feature: Tensor::vector(union)?,
        });
    }
    for _ in 0..n_gt {
        let b = r.bbox("gt box")?;
        let label = r.u32("gt label")?;
        scene.annotation.gt_boxes.push(b);
        scene.annotation.gt_labels.push(label);
    }
    for _ in 0..n_trip {
        let subject = r.u32("triplet")?;
        let predicate = r.u32("triplet")?;
        let object = r.u32("triplet")?;
        scene.annotation.gt_triplets.push(Triplet {
            subject,
            predicate,
            object,
        });
    }
    if r.pos != buf.len() {
        return Err(r.err(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    scene.validate().map_err(|e| Error::Format {
        offset: buf.len() as u64,
        message: format!("inconsistent scene: {e}"),
    })?;
    Ok(scene)
}

pub fn save_scene_file(path: impl AsRef<Path>, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)?)?;
    Ok(())
}

pub fn load_scene_file(path: impl AsRef<Path>) -> Result<Scene> {
    decode_scene(&fs::read(path)?)
}

/// Reads a manifest: one scene path per line, `#` starts a comment.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, scenes: &[PathBuf]) -> Result<()> {
    let mut text = String::from("# scene files, one per line\n");
    for s in scenes {
        text.push_str(&s.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_manifest_scenes(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_manifest(path)?.iter().map(load_scene_file).collect()
}
