//! Per-pixel class assignments and the per-class score maps they come from.

use crate::error::{Error, Result};
use crate::tensor::{GridShape, Tensor};

/// Per-pixel class index over an `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Fails unless every label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            }),
            None => Ok(()),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(LabelMap {
            height: h,
            width: w,
            data,
        })
    }

    /// Per-pixel argmax of an `[H, W, K]` map; ties go to the lowest index.
    pub fn argmax(scores: &Tensor) -> Result<LabelMap> {
        let g = scores.grid()?;
        if g.channels > u8::MAX as usize + 1 {
            return Err(Error::Shape(format!("{} classes", g.channels)));
        }
        let data = scores
            .data()
            .chunks_exact(g.channels)
            .map(|px| {
                let mut best = 0;
                for (k, &v) in px.iter().enumerate().skip(1) {
                    if v > px[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        Ok(LabelMap {
            height: g.height,
            width: g.width,
            data,
        })
    }

    /// One-hot `[H, W, K]` encoding with `on`/`off` values.
    pub fn one_hot(&self, classes: usize, on: f32, off: f32) -> Result<Tensor> {
        self.check_classes(classes)?;
        let mut data = vec![off; self.data.len() * classes];
        for (p, &l) in self.data.iter().enumerate() {
            data[p * classes + l as usize] = on;
        }
        Tensor::new(&[self.height, self.width, classes], data)
    }
}

/// Per-class heat maps `u_k` stacked as an `[H, W, K]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    scores: Tensor,
}

impl ScoreStack {
    pub fn new(scores: Tensor) -> Result<Self> {
        let g = scores.grid()?;
        if g.channels < 2 {
            return Err(Error::Shape(format!(
                "a score stack needs at least 2 classes, got {}",
                g.channels
            )));
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("score stack".into()));
        }
        Ok(ScoreStack { scores })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scores
    }

    pub fn into_tensor(self) -> Tensor {
        self.scores
    }

    pub fn grid(&self) -> GridShape {
        self.scores.grid().expect("validated at construction")
    }

    pub fn classes(&self) -> usize {
        self.grid().channels
    }

    pub fn argmax(&self) -> LabelMap {
        LabelMap::argmax(&self.scores).expect("validated at construction")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ScoreStack> {
        Ok(ScoreStack {
            scores: self.scores.crop(y0, x0, h, w)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_tie_goes_to_lowest_index() {
        let t = Tensor::new(&[1, 2, 3], vec![0.5, 0.5, 0.1, 0.0, 0.2, 0.2]).unwrap();
        assert_eq!(LabelMap::argmax(&t).unwrap().data(), &[0, 1]);
    }

    #[test]
    fn label_range_check() {
        let l = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        assert!(l.check_classes(3).is_ok());
        assert!(matches!(
            l.check_classes(2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn score_stack_rejects_single_class_and_nan() {
        assert!(ScoreStack::new(Tensor::zeros(&[2, 2, 1])).is_err());
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()[3] = f32::NAN;
        assert!(ScoreStack::new(t).is_err());
    }
}
