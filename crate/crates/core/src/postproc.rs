//! Text boxes from score and link maps: positive pixels joined into
//! connected components through positive links.

use half::f16;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::Tensor;

/// Neighbor offsets `(dy, dx)` in link-channel order: E, SE, S, SW, W, NW,
/// N, NE. Direction `k` and `(k + 4) % 8` are opposite.
pub const NEIGHBORS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
}

/// Positive-class score `1 x H x W` and links `8 x H x W`, all in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMaps {
    score: Tensor<f16>,
    links: Tensor<f16>,
}

fn softmax_pos(neg: f16, pos: f16) -> f16 {
    let p = 1.0f32 / (1.0 + libm::expf(neg.to_f32() - pos.to_f32()));
    f16::from_f32(p)
}

impl PredictionMaps {
    pub fn new(score: Tensor<f16>, links: Tensor<f16>) -> Result<Self, PostprocError> {
        let (sc, h, w) = score.shape();
        if sc != 1 || links.shape() != (8, h, w) {
            return Err(PostprocError::Shape(format!(
                "score {:?} and links {:?} must be 1xHxW and 8xHxW",
                score.shape(),
                links.shape()
            )));
        }
        let in_range = |v: &f16| (0.0..=1.0).contains(&v.to_f32());
        if !score.data().iter().all(in_range) || !links.data().iter().all(in_range) {
            return Err(PostprocError::Param("prediction values must lie in [0, 1]".into()));
        }
        Ok(Self { score, links })
    }

    /// Accepts network heads as probabilities (1 score channel, 8 link
    /// channels) or as logit pairs (2 score channels `neg, pos`; 16 link
    /// channels `neg, pos` per neighbor), which are softmaxed.
    pub fn from_heads(score: &Tensor<f16>, link: &Tensor<f16>) -> Result<Self, PostprocError> {
        let (sc, h, w) = score.shape();
        let score = match sc {
            1 => score.clone(),
            2 => Tensor::from_fn(1, h, w, |_, y, x| softmax_pos(score.at(0, y, x), score.at(1, y, x))),
            _ => return Err(PostprocError::Shape(format!("score head has {sc} channels, expected 1 or 2"))),
        };
        let links = match link.shape() {
            (8, lh, lw) if (lh, lw) == (h, w) => link.clone(),
            (16, lh, lw) if (lh, lw) == (h, w) => {
                Tensor::from_fn(8, h, w, |k, y, x| softmax_pos(link.at(2 * k, y, x), link.at(2 * k + 1, y, x)))
            }
            s => {
                return Err(PostprocError::Shape(format!(
                    "link head {s:?} does not match an 8- or 16-channel map of {h}x{w}"
                )))
            }
        };
        Self::new(score, links)
    }

    pub fn height(&self) -> usize {
        self.score.height()
    }

    pub fn width(&self) -> usize {
        self.score.width()
    }

    pub fn score(&self) -> &Tensor<f16> {
        &self.score
    }

    pub fn links(&self) -> &Tensor<f16> {
        &self.links
    }

    pub fn positive(&self, score_thresh: f32) -> Vec<bool> {
        self.score.data().iter().map(|v| v.to_f32() >= score_thresh).collect()
    }

    /// Whether `(y, x)` and its neighbor in direction `k` are linked by
    /// either pixel's link toward the other.
    pub fn linked(&self, y: usize, x: usize, k: usize, link_thresh: f32) -> bool {
        let (dy, dx) = NEIGHBORS[k];
        let (ny, nx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
        self.links.at(k, y, x).to_f32() >= link_thresh || self.links.at((k + 4) % 8, ny, nx).to_f32() >= link_thresh
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TextBox {
    pub id: usize,
    pub area: usize,
    /// `[x_min, y_min, x_max, y_max]`, inclusive
    pub bbox: [usize; 4],
    pub score: f64,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
    }
}

fn check_thresholds(score_thresh: f32, link_thresh: f32) -> Result<(), PostprocError> {
    for (name, t) in [("score", score_thresh), ("link", link_thresh)] {
        if !(t > 0.0 && t < 1.0) {
            return Err(PostprocError::Param(format!("{name} threshold {t} is outside (0, 1)")));
        }
    }
    Ok(())
}

/// Component label per pixel (`None` for negative pixels). Labels are
/// numbered by each component's first pixel in raster order.
pub fn label_components(maps: &PredictionMaps, score_thresh: f32, link_thresh: f32) -> Result<Vec<Option<usize>>, PostprocError> {
    check_thresholds(score_thresh, link_thresh)?;
    let (h, w) = (maps.height(), maps.width());
    let pos = maps.positive(score_thresh);
    let mut uf = UnionFind::new(h * w);
    for y in 0..h {
        for x in 0..w {
            if !pos[y * w + x] {
                continue;
            }
            for (k, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if pos[q] && maps.linked(y, x, k, link_thresh) {
                    uf.union(y * w + x, q);
                }
            }
        }
    }
    let mut canon = vec![usize::MAX; h * w];
    let mut next = 0;
    Ok((0..h * w)
        .map(|i| {
            if !pos[i] {
                return None;
            }
            let r = uf.find(i);
            if canon[r] == usize::MAX {
                canon[r] = next;
                next += 1;
            }
            Some(canon[r])
        })
        .collect())
}

/// Boxes of components with at least `min_area` pixels, sorted by
/// `(y_min, x_min)`.
pub fn extract_boxes(
    maps: &PredictionMaps,
    score_thresh: f32,
    link_thresh: f32,
    min_area: usize,
) -> Result<Vec<TextBox>, PostprocError> {
    let labels = label_components(maps, score_thresh, link_thresh)?;
    let w = maps.width();
    let mut boxes: Vec<TextBox> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let Some(id) = *l else { continue };
        let (y, x) = (i / w, i % w);
        if id == boxes.len() {
            boxes.push(TextBox {
                id,
                area: 0,
                bbox: [x, y, x, y],
                score: 0.0,
            });
            sums.push(0.0);
        }
        let b = &mut boxes[id];
        b.area += 1;
        b.bbox = [b.bbox[0].min(x), b.bbox[1].min(y), b.bbox[2].max(x), b.bbox[3].max(y)];
        sums[id] += maps.score.data()[i].to_f64();
    }
    for (b, s) in boxes.iter_mut().zip(sums) {
        b.score = s / b.area as f64;
    }
    boxes.retain(|b| b.area >= min_area);
    boxes.sort_by_key(|b| (b.bbox[1], b.bbox[0], b.id));
    Ok(boxes)
}

pub fn boxes_to_json(boxes: &[TextBox]) -> String {
    serde_json::to_string_pretty(boxes).expect("boxes serialize")
}
