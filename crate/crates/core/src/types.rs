//! Geometry and identity types shared by the grammar, rewards and evaluation.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("box coordinates must be finite and non-negative")]
    NegativeOrNonFinite,
    #[error("box corners are inverted (x2 < x1 or y2 < y1)")]
    Inverted,
    #[error("image and object indices are 1-based")]
    ZeroIndex,
    #[error("object description is empty")]
    EmptyDescription,
}

/// Axis-aligned rectangle `(x1, y1, x2, y2)` in abstract pixel space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, TypeError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(TypeError::NegativeOrNonFinite);
        }
        if x2 < x1 || y2 < y1 {
            return Err(TypeError::Inverted);
        }
        // `+ 0.0` folds -0.0 into 0.0 so rendering never emits a sign.
        Ok(Self {
            x1: x1 + 0.0,
            y1: y1 + 0.0,
            x2: x2 + 0.0,
            y2: y2 + 0.0,
        })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap area with `other` (zero when disjoint or touching).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x2 <= width && self.y2 <= height
    }

    /// Clamps raw corners into `[0, width] x [0, height]`.
    pub fn clamped(raw: [f64; 4], width: f64, height: f64) -> Result<Self, TypeError> {
        if raw.iter().any(|c| !c.is_finite()) {
            return Err(TypeError::NegativeOrNonFinite);
        }
        let [x1, y1, x2, y2] = raw;
        if x2 < x1 || y2 < y1 {
            return Err(TypeError::Inverted);
        }
        Self::new(
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        )
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        BoundingBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// `(n, k)`: the k-th object of the n-th image, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PositionId {
    image_index: u32,
    object_index: u32,
}

impl PositionId {
    pub fn new(image_index: u32, object_index: u32) -> Result<Self, TypeError> {
        if image_index == 0 || object_index == 0 {
            return Err(TypeError::ZeroIndex);
        }
        Ok(Self {
            image_index,
            object_index,
        })
    }

    pub fn image_index(&self) -> u32 {
        self.image_index
    }

    pub fn object_index(&self) -> u32 {
        self.object_index
    }
}

impl fmt::Display for PositionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}-{}]", self.image_index, self.object_index)
    }
}

/// One grounding result: where the object is, what it is, and its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroundedObjectRepr", into = "GroundedObjectRepr")]
pub struct GroundedObject {
    pub position: PositionId,
    pub description: String,
    pub bbox: BoundingBox,
}

impl GroundedObject {
    pub fn new(
        position: PositionId,
        description: impl Into<String>,
        bbox: BoundingBox,
    ) -> Result<Self, TypeError> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(TypeError::EmptyDescription);
        }
        Ok(Self {
            position,
            description,
            bbox,
        })
    }
}

/// Flat JSON form used by every JSONL file in the project.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundedObjectRepr {
    image_index: u32,
    object_index: u32,
    description: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

impl TryFrom<GroundedObjectRepr> for GroundedObject {
    type Error = TypeError;

    fn try_from(repr: GroundedObjectRepr) -> Result<Self, Self::Error> {
        let position = PositionId::new(repr.image_index, repr.object_index)?;
        GroundedObject::new(position, repr.description, repr.bbox)
    }
}

impl From<GroundedObject> for GroundedObjectRepr {
    fn from(obj: GroundedObject) -> Self {
        Self {
            image_index: obj.position.image_index,
            object_index: obj.position.object_index,
            description: obj.description,
            bbox: obj.bbox,
        }
    }
}
