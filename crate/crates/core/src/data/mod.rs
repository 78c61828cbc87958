//! Samples, synthetic scene generation, splitting, cropping and on-disk datasets.
//!
//! A dataset directory holds `images/<id>.pgm`, `masks/<id>.pgm` and a `split.txt`
//! manifest of `<id> <train|val|test>` lines.

pub mod pgm;
mod synth;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use synth::{generate_synthetic, Background, SyntheticSceneConfig, MAX_TARGET_PIXELS};

use crate::error::{Error, Result};
use crate::raster::{Image, Mask, Raster};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Mask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::dim(
                "sample",
                format!("image {:?} vs mask {:?}", image.dims(), mask.dims()),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    /// Mirrors image and mask left to right.
    pub fn hflip(&self) -> Self {
        let flip = |r: usize, c: usize, w: usize| (r, w - 1 - c);
        let w = self.image.width();
        Self {
            id: self.id.clone(),
            image: Image::from_fn(self.image.height(), w, |r, c| {
                let (r, c) = flip(r, c, w);
                self.image.get(r, c)
            }),
            mask: Mask::from_fn(self.mask.height(), w, |r, c| {
                let (r, c) = flip(r, c, w);
                self.mask.get(r, c)
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::Config(format!("unknown partition {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(id, partition)` pairs in manifest order.
    pub fn manifest(&self) -> Vec<(String, Partition)> {
        [
            (Partition::Train, &self.train),
            (Partition::Val, &self.val),
            (Partition::Test, &self.test),
        ]
        .into_iter()
        .flat_map(|(p, s)| s.iter().map(move |x| (x.id.clone(), p)))
        .collect()
    }

    pub fn map(&self, f: impl Fn(&Sample) -> Sample) -> Self {
        Self {
            train: self.train.iter().map(&f).collect(),
            val: self.val.iter().map(&f).collect(),
            test: self.test.iter().map(&f).collect(),
        }
    }
}

/// Partition sizes for `n` items under integer `ratios`: floor, floor, remainder.
pub fn split_sizes(n: usize, ratios: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    if n < 5 {
        return Err(Error::Config(format!(
            "need at least 5 samples to split, got {n}"
        )));
    }
    let train = n * ratios.0 / total;
    let val = n * ratios.1 / total;
    Ok((train, val, n - train - val))
}

/// Deterministically shuffles and partitions `samples` (default ratios 3:1:1).
pub fn split_dataset(
    samples: Vec<Sample>,
    ratios: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetSplit> {
    let (n_train, n_val, _) = split_sizes(samples.len(), ratios)?;
    let mut samples = samples;
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        val,
        test,
    })
}

/// Maps rows/columns between a source raster and a fixed-size target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub source: (usize, usize),
    pub target: (usize, usize),
}

impl CropWindow {
    pub fn new(source: (usize, usize), target: (usize, usize)) -> Self {
        Self { source, target }
    }

    /// (source offset, target offset, length) along one axis: centered crop or centered pad.
    fn axis(src: usize, dst: usize) -> (usize, usize, usize) {
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    }

    fn place<P: Copy>(
        from: &Raster<P>,
        to: (usize, usize),
        rows: (usize, usize, usize),
        cols: (usize, usize, usize),
        fill: P,
    ) -> Raster<P> {
        let mut out = Raster::filled(to.0, to.1, fill);
        for r in 0..rows.2 {
            for c in 0..cols.2 {
                out.set(rows.1 + r, cols.1 + c, from.get(rows.0 + r, cols.0 + c));
            }
        }
        out
    }

    /// Source raster → target geometry.
    pub fn apply<P: Copy>(&self, raster: &Raster<P>, fill: P) -> Raster<P> {
        debug_assert_eq!(raster.dims(), self.source);
        let rows = Self::axis(self.source.0, self.target.0);
        let cols = Self::axis(self.source.1, self.target.1);
        Self::place(raster, self.target, rows, cols, fill)
    }

    /// Target raster → source geometry; pixels cropped away come back as `fill`.
    pub fn invert<P: Copy>(&self, raster: &Raster<P>, fill: P) -> Raster<P> {
        debug_assert_eq!(raster.dims(), self.target);
        let (sr, tr, lr) = Self::axis(self.source.0, self.target.0);
        let (sc, tc, lc) = Self::axis(self.source.1, self.target.1);
        Self::place(raster, self.source, (tr, sr, lr), (tc, sc, lc), fill)
    }
}

/// Center-crops axes longer than `target` and zero-pads shorter ones, identically for image and mask.
pub fn crop_or_pad(sample: &Sample, target: (usize, usize)) -> Sample {
    let window = CropWindow::new(sample.image.dims(), target);
    Sample {
        id: sample.id.clone(),
        image: window.apply(&sample.image, 0.0),
        mask: window.apply(&sample.mask, false),
    }
}

/// Training augmentation: a uniformly placed crop where the sample is larger than `target`,
/// centered padding elsewhere.
pub fn random_crop<R: Rng + ?Sized>(
    sample: &Sample,
    target: (usize, usize),
    rng: &mut R,
) -> Sample {
    let (h, w) = sample.image.dims();
    let pick = |src: usize, dst: usize, rng: &mut R| {
        if src > dst {
            rng.random_range(0..=src - dst)
        } else {
            0
        }
    };
    let (r0, c0) = (pick(h, target.0, rng), pick(w, target.1, rng));
    let (ch, cw) = (h.min(target.0), w.min(target.1));
    let sub = Sample {
        id: sample.id.clone(),
        image: Image::from_fn(ch, cw, |r, c| sample.image.get(r0 + r, c0 + c)),
        mask: Mask::from_fn(ch, cw, |r, c| sample.mask.get(r0 + r, c0 + c)),
    };
    crop_or_pad(&sub, target)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, Partition)]) -> Result<()> {
    let text: String = entries
        .iter()
        .map(|(id, p)| format!("{id} {p}\n"))
        .collect();
    write_file(path.as_ref(), text.as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Partition)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let mut entries = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let mut parts = trimmed.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(p), None) => entries.push((
                    id.to_owned(),
                    p.parse()
                        .map_err(|_| Error::parse(offset, format!("bad partition {p:?}")))?,
                )),
                _ => {
                    return Err(Error::parse(
                        offset,
                        format!("expected `<id> <partition>`, got {trimmed:?}"),
                    ))
                }
            }
        }
        offset += line.len();
    }
    Ok(entries)
}

/// Writes `images/`, `masks/` and `split.txt` under `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in split.train.iter().chain(&split.val).chain(&split.test) {
        pgm::save_raster(
            &pgm::quantize(&s.image),
            dir.join("images").join(format!("{}.pgm", s.id)),
        )?;
        pgm::save_raster(
            &pgm::mask_to_raster(&s.mask),
            dir.join("masks").join(format!("{}.pgm", s.id)),
        )?;
    }
    write_manifest(dir.join("split.txt"), &split.manifest())
}

pub fn load_sample(dir: impl AsRef<Path>, id: &str) -> Result<Sample> {
    let dir = dir.as_ref();
    let image = pgm::dequantize(&pgm::load_raster(
        dir.join("images").join(format!("{id}.pgm")),
    )?);
    let mask = pgm::raster_to_mask(&pgm::load_raster(
        dir.join("masks").join(format!("{id}.pgm")),
    )?);
    Sample::new(id, image, mask)
}

/// Loads a dataset directory according to its `split.txt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut split = DatasetSplit::default();
    for (id, part) in read_manifest(dir.join("split.txt"))? {
        let sample = load_sample(dir, &id)?;
        match part {
            Partition::Train => split.train.push(sample),
            Partition::Val => split.val.push(sample),
            Partition::Test => split.test.push(sample),
        }
    }
    Ok(split)
}
