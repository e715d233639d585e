//! The augmentation search space and its application to images.
//!
//! The space is organised in heads (Flip, Crop, ColorShape, Dropout). A policy
//! picks one sub-policy per head and the picks are applied in head order:
//! flip, crop, color/shape, dropout. Every head holds exactly one `Identity`.

mod ops;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use ops::FILL_VALUE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Identity,
    HorizontalFlip,
    Cropshift,
    Autocontrast,
    Equalize,
    Posterize,
    Solarize,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    Erasing,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Identity,
        OpKind::HorizontalFlip,
        OpKind::Cropshift,
        OpKind::Autocontrast,
        OpKind::Equalize,
        OpKind::Posterize,
        OpKind::Solarize,
        OpKind::Rotate,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
        OpKind::Color,
        OpKind::Contrast,
        OpKind::Brightness,
        OpKind::Sharpness,
        OpKind::Erasing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "Identity",
            OpKind::HorizontalFlip => "HorizontalFlip",
            OpKind::Cropshift => "Cropshift",
            OpKind::Autocontrast => "Autocontrast",
            OpKind::Equalize => "Equalize",
            OpKind::Posterize => "Posterize",
            OpKind::Solarize => "Solarize",
            OpKind::Rotate => "Rotate",
            OpKind::ShearX => "ShearX",
            OpKind::ShearY => "ShearY",
            OpKind::TranslateX => "TranslateX",
            OpKind::TranslateY => "TranslateY",
            OpKind::Color => "Color",
            OpKind::Contrast => "Contrast",
            OpKind::Brightness => "Brightness",
            OpKind::Sharpness => "Sharpness",
            OpKind::Erasing => "Erasing",
        }
    }

    /// Ops that carry no magnitude.
    pub fn is_unparameterized(self) -> bool {
        matches!(
            self,
            OpKind::Identity | OpKind::HorizontalFlip | OpKind::Autocontrast | OpKind::Equalize
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Catalog(format!("unknown operation `{s}`")))
    }
}

/// One operation at one magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubPolicy {
    pub op: OpKind,
    pub magnitude: Option<f32>,
}

impl SubPolicy {
    pub const IDENTITY: SubPolicy = SubPolicy {
        op: OpKind::Identity,
        magnitude: None,
    };

    pub fn new(op: OpKind, magnitude: Option<f32>) -> Self {
        Self { op, magnitude }
    }

    fn plain(op: OpKind) -> Self {
        Self { op, magnitude: None }
    }

    fn with(op: OpKind, m: f32) -> Self {
        Self {
            op,
            magnitude: Some(m),
        }
    }

    pub fn label(&self) -> String {
        match self.magnitude {
            Some(m) => format!("{}({m})", self.op),
            None => self.op.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    Flip,
    Crop,
    ColorShape,
    Dropout,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Flip => "Flip",
            HeadKind::Crop => "Crop",
            HeadKind::ColorShape => "ColorShape",
            HeadKind::Dropout => "Dropout",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadKind::Flip, HeadKind::Crop, HeadKind::ColorShape, HeadKind::Dropout]
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Catalog(format!("unknown head `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    pub entries: Vec<SubPolicy>,
}

impl Head {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Consecutive runs of entries sharing an operation, as `(op, index range)`.
    /// The ColorShape head lists each op's magnitudes contiguously, so these
    /// are its operation types.
    pub fn op_groups(&self) -> Vec<(OpKind, std::ops::Range<usize>)> {
        let mut groups: Vec<(OpKind, std::ops::Range<usize>)> = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            match groups.last_mut() {
                Some((op, range)) if *op == e.op => range.end = i + 1,
                _ => groups.push((e.op, i..i + 1)),
            }
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    #[default]
    Standard,
    /// No Flip head, for datasets where mirroring changes semantics (digits).
    NoFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpace {
    kind: SpaceKind,
    heads: Vec<Head>,
}

/// One sub-policy index per head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrajectoryCode(pub Vec<usize>);

impl TrajectoryCode {
    pub fn identity(space: &AugmentationSpace) -> Self {
        TrajectoryCode(
            space
                .heads()
                .iter()
                .map(|h| h.entries.iter().position(|e| e.op == OpKind::Identity).unwrap_or(0))
                .collect(),
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

const CROPSHIFT_MAX: u32 = 15;
const POSTERIZE_BITS: [f32; 5] = [4.0, 5.0, 6.0, 7.0, 8.0];
const SOLARIZE: [f32; 10] = [25.0, 51.0, 76.0, 102.0, 128.0, 153.0, 179.0, 204.0, 230.0, 256.0];
const ROTATE: [f32; 10] = [3.0, 6.0, 9.0, 12.0, 15.0, 18.0, 21.0, 24.0, 27.0, 30.0];
const SHEAR: [f32; 10] = [0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.21, 0.24, 0.27, 0.30];
const TRANSLATE: [f32; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
const ENHANCE: [f32; 10] = [0.28, 0.46, 0.64, 0.82, 1.0, 1.18, 1.36, 1.54, 1.72, 1.9];
const ERASING: [f32; 10] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50];

fn graded(op: OpKind, magnitudes: &[f32]) -> impl Iterator<Item = SubPolicy> + '_ {
    magnitudes.iter().map(move |&m| SubPolicy::with(op, m))
}

/// The standard catalog (head sizes 2, 16, 108, 11) or its Flip-less variant.
pub fn build_space(kind: SpaceKind) -> AugmentationSpace {
    let mut heads = Vec::with_capacity(4);
    if kind == SpaceKind::Standard {
        heads.push(Head {
            kind: HeadKind::Flip,
            entries: vec![SubPolicy::IDENTITY, SubPolicy::plain(OpKind::HorizontalFlip)],
        });
    }
    let mut crop = vec![SubPolicy::IDENTITY];
    crop.extend((1..=CROPSHIFT_MAX).map(|m| SubPolicy::with(OpKind::Cropshift, m as f32)));
    heads.push(Head {
        kind: HeadKind::Crop,
        entries: crop,
    });

    let mut color = vec![
        SubPolicy::IDENTITY,
        SubPolicy::plain(OpKind::Autocontrast),
        SubPolicy::plain(OpKind::Equalize),
    ];
    color.extend(graded(OpKind::Posterize, &POSTERIZE_BITS));
    color.extend(graded(OpKind::Solarize, &SOLARIZE));
    color.extend(graded(OpKind::Rotate, &ROTATE));
    color.extend(graded(OpKind::ShearX, &SHEAR));
    color.extend(graded(OpKind::ShearY, &SHEAR));
    color.extend(graded(OpKind::TranslateX, &TRANSLATE));
    color.extend(graded(OpKind::TranslateY, &TRANSLATE));
    for op in [OpKind::Color, OpKind::Contrast, OpKind::Brightness, OpKind::Sharpness] {
        color.extend(graded(op, &ENHANCE));
    }
    heads.push(Head {
        kind: HeadKind::ColorShape,
        entries: color,
    });

    let mut dropout = vec![SubPolicy::IDENTITY];
    dropout.extend(graded(OpKind::Erasing, &ERASING));
    heads.push(Head {
        kind: HeadKind::Dropout,
        entries: dropout,
    });
    AugmentationSpace { kind, heads }
}

impl AugmentationSpace {
    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    /// Logit count per head; checkpoints carry this to detect mismatched spaces.
    pub fn signature(&self) -> Vec<usize> {
        self.heads.iter().map(Head::len).collect()
    }

    pub fn num_entries(&self) -> usize {
        self.heads.iter().map(Head::len).sum()
    }

    pub fn head_index(&self, kind: HeadKind) -> Option<usize> {
        self.heads.iter().position(|h| h.kind == kind)
    }

    pub fn validate(&self, code: &TrajectoryCode) -> Result<()> {
        if code.0.len() != self.heads.len() {
            return Err(Error::Catalog(format!(
                "code has {} indices for {} heads",
                code.0.len(),
                self.heads.len()
            )));
        }
        for (head, &idx) in self.heads.iter().zip(&code.0) {
            if idx >= head.len() {
                return Err(Error::Catalog(format!(
                    "index {idx} out of range for {} head with {} entries",
                    head.kind,
                    head.len()
                )));
            }
        }
        Ok(())
    }

    pub fn decode(&self, code: &TrajectoryCode) -> Result<Vec<SubPolicy>> {
        self.validate(code)?;
        Ok(self
            .heads
            .iter()
            .zip(&code.0)
            .map(|(h, &i)| h.entries[i])
            .collect())
    }

    /// Human-readable catalog, one `head<TAB>op<TAB>magnitude<TAB>index` line
    /// per sub-policy; `-` marks a missing magnitude.
    pub fn to_catalog_text(&self) -> String {
        let mut out = String::from("# head\top\tmagnitude\tindex\n");
        for head in &self.heads {
            for (i, e) in head.entries.iter().enumerate() {
                let m = e.magnitude.map_or_else(|| "-".to_string(), |m| m.to_string());
                out.push_str(&format!("{}\t{}\t{}\t{}\n", head.kind, e.op, m, i));
            }
        }
        out
    }

    /// Parses [`Self::to_catalog_text`] output and checks it matches a built-in space.
    pub fn from_catalog_text(text: &str) -> Result<Self> {
        let mut heads: Vec<Head> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Catalog(format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(at(format!("expected 4 fields, got {}", fields.len())));
            }
            let kind: HeadKind = fields[0].parse().map_err(|e: Error| at(e.to_string()))?;
            let op: OpKind = fields[1].parse().map_err(|e: Error| at(e.to_string()))?;
            let magnitude = match fields[2] {
                "-" => None,
                m => Some(m.parse::<f32>().map_err(|e| at(format!("bad magnitude `{m}`: {e}")))?),
            };
            let index: usize = fields[3]
                .parse()
                .map_err(|e| at(format!("bad index `{}`: {e}", fields[3])))?;
            if heads.last().map(|h| h.kind) != Some(kind) {
                heads.push(Head {
                    kind,
                    entries: Vec::new(),
                });
            }
            let head = heads.last_mut().expect("pushed above");
            if index != head.entries.len() {
                return Err(at(format!("index {index} out of sequence")));
            }
            head.entries.push(SubPolicy { op, magnitude });
        }
        for kind in [SpaceKind::Standard, SpaceKind::NoFlip] {
            let built = build_space(kind);
            if built.heads == heads {
                return Ok(built);
            }
        }
        Err(Error::Catalog("catalog does not match a supported space".into()))
    }
}

/// Applies one sub-policy, returning a new image of the same shape with values
/// kept in `[0, 1]`.
pub fn apply_subpolicy<R: Rng + ?Sized>(img: &Image, sp: &SubPolicy, rng: &mut R) -> Result<Image> {
    let need = |sp: &SubPolicy| {
        sp.magnitude
            .ok_or_else(|| Error::Catalog(format!("{} requires a magnitude", sp.op)))
    };
    if sp.op.is_unparameterized() && sp.magnitude.is_some() {
        return Err(Error::Catalog(format!("{} takes no magnitude", sp.op)));
    }
    let out = match sp.op {
        OpKind::Identity => img.clone(),
        OpKind::HorizontalFlip => ops::hflip(img),
        OpKind::Cropshift => ops::cropshift(img, need(sp)? as usize, rng),
        OpKind::Autocontrast => ops::autocontrast(img),
        OpKind::Equalize => ops::equalize(img),
        OpKind::Posterize => ops::posterize(img, need(sp)? as u32),
        OpKind::Solarize => ops::solarize(img, need(sp)? as u32),
        OpKind::Rotate => ops::rotate(img, random_sign(rng) * need(sp)?),
        OpKind::ShearX => ops::shear_x(img, random_sign(rng) * need(sp)?),
        OpKind::ShearY => ops::shear_y(img, random_sign(rng) * need(sp)?),
        OpKind::TranslateX => ops::translate(img, random_sign(rng) as i64 * need(sp)? as i64, 0),
        OpKind::TranslateY => ops::translate(img, 0, random_sign(rng) as i64 * need(sp)? as i64),
        OpKind::Color => ops::color(img, need(sp)?),
        OpKind::Contrast => ops::contrast(img, need(sp)?),
        OpKind::Brightness => ops::brightness(img, need(sp)?),
        OpKind::Sharpness => ops::sharpness(img, need(sp)?),
        OpKind::Erasing => ops::erase(img, need(sp)?, rng),
    };
    Ok(out)
}

fn random_sign<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Applies the decoded code head by head, in catalog order.
pub fn apply_trajectory<R: Rng + ?Sized>(
    img: &Image,
    code: &TrajectoryCode,
    space: &AugmentationSpace,
    rng: &mut R,
) -> Result<Image> {
    let subs = space.decode(code)?;
    let mut cur = img.clone();
    for sp in &subs {
        if sp.op != OpKind::Identity {
            cur = apply_subpolicy(&cur, sp, rng)?;
        }
    }
    Ok(cur)
}
