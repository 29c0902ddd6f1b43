//! Box types and the geometric predicates every other stage builds on.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners must be finite with x1 < x2 and y1 < y2")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid score {0}: must lie in [0, 1]")]
    InvalidScore(f64),
    #[error("invalid frame size {width}x{height}")]
    InvalidFrameSize { width: u32, height: u32 },
}

/// Axis-aligned box in continuous pixel coordinates, origin at the top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
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

    pub fn corners(&self) -> [f64; 4] {
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

    /// Overlap region, or `None` when the boxes only touch or are disjoint.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Option<BBox> {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy).ok()
    }

    /// True when `other` lies entirely inside `self` (boundaries included).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Lexicographic order on (x1, y1, x2, y2), used as the tie-break in score sorts.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Symmetric, exactly 1 for identical boxes, 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let inter = inter.area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameSize {
    width: u32,
    height: u32,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidFrameSize { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
        }
    }
}

/// Intersects `b` with the frame. Returns the clipped box and the fraction of
/// the original area that survived, or `None` if nothing (or only a
/// zero-area sliver) is left.
pub fn clip_to_frame(b: &BBox, size: FrameSize) -> Option<(BBox, f64)> {
    let clipped = b.intersection(&size.bounds())?;
    let coverage = if clipped == *b {
        1.0
    } else {
        (clipped.area() / b.area()).clamp(0.0, 1.0)
    };
    if coverage <= 0.0 {
        return None;
    }
    Some((clipped, coverage))
}

/// One labelled box. `source_offset` is 0 for the detector's own output on the
/// target frame and `i` for a box propagated from frame `target - i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub bbox: BBox,
    score: f64,
    pub source_offset: i32,
}

impl Detection {
    pub fn new(class_id: u32, bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        check_score(score)?;
        Ok(Self {
            class_id,
            bbox,
            score,
            source_offset: 0,
        })
    }

    pub fn with_offset(mut self, offset: i32) -> Self {
        self.source_offset = offset;
        self
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, GeometryError> {
        check_score(score)?;
        self.score = score;
        Ok(self)
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = bbox;
        self
    }
}

fn check_score(score: f64) -> Result<(), GeometryError> {
    if (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(GeometryError::InvalidScore(score))
    }
}

/// All detections attached to one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

impl LabelSet {
    pub fn new(frame_index: usize, detections: Vec<Detection>) -> Self {
        Self {
            frame_index,
            detections,
        }
    }

    pub fn empty(frame_index: usize) -> Self {
        Self::new(frame_index, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Detections with score strictly above `threshold`, order preserved.
    pub fn above(&self, threshold: f64) -> LabelSet {
        LabelSet::new(
            self.frame_index,
            self.detections
                .iter()
                .filter(|d| d.score() > threshold)
                .copied()
                .collect(),
        )
    }
}
