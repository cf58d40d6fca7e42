use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;

/// Label strength held by a client. Each client holds exactly one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisionLevel {
    #[serde(rename = "L", alias = "pixel")]
    PixelLevel,
    #[serde(rename = "B", alias = "box")]
    BoundingBox,
    #[serde(rename = "I", alias = "image")]
    ImageLevel,
    #[serde(rename = "U", alias = "unlabeled")]
    Unlabeled,
}

impl SupervisionLevel {
    pub const ALL: [SupervisionLevel; 4] = [
        SupervisionLevel::PixelLevel,
        SupervisionLevel::BoundingBox,
        SupervisionLevel::ImageLevel,
        SupervisionLevel::Unlabeled,
    ];

    /// One-letter tag: L, B, I or U.
    pub fn tag(self) -> char {
        match self {
            SupervisionLevel::PixelLevel => 'L',
            SupervisionLevel::BoundingBox => 'B',
            SupervisionLevel::ImageLevel => 'I',
            SupervisionLevel::Unlabeled => 'U',
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "L" | "pixel" => Some(SupervisionLevel::PixelLevel),
            "B" | "box" => Some(SupervisionLevel::BoundingBox),
            "I" | "image" => Some(SupervisionLevel::ImageLevel),
            "U" | "unlabeled" => Some(SupervisionLevel::Unlabeled),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SupervisionLevel::PixelLevel => 0,
            SupervisionLevel::BoundingBox => 1,
            SupervisionLevel::ImageLevel => 2,
            SupervisionLevel::Unlabeled => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl std::fmt::Display for SupervisionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tag())
    }
}

/// Inclusive box corners `(r0, c0)`..=`(r1, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl BoundingBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }

    /// Tight box around every foreground pixel, `None` for an empty mask.
    pub fn around(mask: &Grid2D) -> Option<BoundingBox> {
        let mut bbox: Option<BoundingBox> = None;
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) >= 0.5 {
                    bbox = Some(match bbox {
                        None => BoundingBox { r0: r, c0: c, r1: r, c1: c },
                        Some(b) => BoundingBox {
                            r0: b.r0.min(r),
                            c0: b.c0.min(c),
                            r1: b.r1.max(r),
                            c1: b.c1.max(c),
                        },
                    });
                }
            }
        }
        bbox
    }

    pub fn to_grid(&self, height: usize, width: usize) -> Grid2D {
        Grid2D::from_fn(height, width, |r, c| if self.contains(r, c) { 1.0 } else { 0.0 })
    }
}

/// Level-specific label payload as the annotator provided it.
#[derive(Debug, Clone, PartialEq)]
pub enum RawLabel {
    Pixel(Grid2D),
    /// `None` when the image has no lesion.
    Box(Option<BoundingBox>),
    ImageClass { positive: bool },
    Absent,
}

/// Pixel-grid form shared by all label levels.
#[derive(Debug, Clone, PartialEq)]
pub enum CanonicalLabel {
    Mask(Grid2D),
    /// Image-level positive: the image contains foreground somewhere, which
    /// constrains but does not determine the mask.
    PositiveConstraint,
}

impl CanonicalLabel {
    pub fn mask(&self) -> Option<&Grid2D> {
        match self {
            CanonicalLabel::Mask(g) => Some(g),
            CanonicalLabel::PositiveConstraint => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    raw: RawLabel,
    canonical: Option<CanonicalLabel>,
    shape: (usize, usize),
}

impl Supervision {
    pub fn pixel(mask: Grid2D) -> Result<Self> {
        if !mask.is_binary() {
            return Err(Error::Validation("pixel label must be binary".into()));
        }
        Ok(Self {
            shape: mask.shape(),
            canonical: Some(CanonicalLabel::Mask(mask.clone())),
            raw: RawLabel::Pixel(mask),
        })
    }

    pub fn bounding_box(height: usize, width: usize, bbox: Option<BoundingBox>) -> Result<Self> {
        let canonical = match bbox {
            Some(b) => {
                if b.r0 > b.r1 || b.c0 > b.c1 || b.r1 >= height || b.c1 >= width {
                    return Err(Error::Validation(format!(
                        "box {b:?} does not fit a {height}x{width} grid"
                    )));
                }
                b.to_grid(height, width)
            }
            None => Grid2D::zeros(height, width),
        };
        Ok(Self {
            raw: RawLabel::Box(bbox),
            canonical: Some(CanonicalLabel::Mask(canonical)),
            shape: (height, width),
        })
    }

    pub fn image_class(height: usize, width: usize, positive: bool) -> Self {
        let canonical = if positive {
            CanonicalLabel::PositiveConstraint
        } else {
            CanonicalLabel::Mask(Grid2D::zeros(height, width))
        };
        Self {
            raw: RawLabel::ImageClass { positive },
            canonical: Some(canonical),
            shape: (height, width),
        }
    }

    pub fn unlabeled(height: usize, width: usize) -> Self {
        Self {
            raw: RawLabel::Absent,
            canonical: None,
            shape: (height, width),
        }
    }

    pub fn level(&self) -> SupervisionLevel {
        match self.raw {
            RawLabel::Pixel(_) => SupervisionLevel::PixelLevel,
            RawLabel::Box(_) => SupervisionLevel::BoundingBox,
            RawLabel::ImageClass { .. } => SupervisionLevel::ImageLevel,
            RawLabel::Absent => SupervisionLevel::Unlabeled,
        }
    }

    pub fn raw(&self) -> &RawLabel {
        &self.raw
    }

    pub fn canonical(&self) -> Option<&CanonicalLabel> {
        self.canonical.as_ref()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }
}

/// Reduce an exact mask to the information a `level` annotator would give.
pub fn degrade_supervision(truth: &Grid2D, level: SupervisionLevel) -> Result<Supervision> {
    if !truth.is_binary() {
        return Err(Error::Validation("truth mask must be binary".into()));
    }
    let (h, w) = truth.shape();
    Ok(match level {
        SupervisionLevel::PixelLevel => Supervision::pixel(truth.clone())?,
        SupervisionLevel::BoundingBox => Supervision::bounding_box(h, w, BoundingBox::around(truth))?,
        SupervisionLevel::ImageLevel => Supervision::image_class(h, w, truth.sum() > 0.0),
        SupervisionLevel::Unlabeled => Supervision::unlabeled(h, w),
    })
}

/// Pixel-grid form of a label; unlabeled samples have none.
pub fn canonicalize(supervision: &Supervision) -> Result<CanonicalLabel> {
    supervision
        .canonical
        .clone()
        .ok_or_else(|| Error::Usage("unlabeled samples have no canonical label".into()))
}
