//! Synthetic moving-shape video clips.
//!
//! Each clip shows one shape (square, circle or triangle; the class label)
//! translating with constant integer velocity over the frames. Pixels are +1
//! inside the shape and -1 outside, and everything is a deterministic
//! function of the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A video clip as a `[frames, channels, height, width]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    data: Tensor,
}

impl FrameSequence {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::dim(format!(
                "frame sequence must be [f, c, h, w], got {:?}",
                data.shape()
            )));
        }
        if data.shape()[0] == 0 {
            return Err(Error::EmptyInput("frame sequence with zero frames"));
        }
        Ok(FrameSequence { data })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

/// The three clip classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Square,
    Circle,
    Triangle,
}

pub const N_CLASSES: usize = 3;

impl ShapeClass {
    pub fn from_class_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(ShapeClass::Square),
            1 => Ok(ShapeClass::Circle),
            2 => Ok(ShapeClass::Triangle),
            _ => Err(Error::contract(format!("class id {id} outside 0..3"))),
        }
    }

    pub fn class_id(self) -> usize {
        match self {
            ShapeClass::Square => 0,
            ShapeClass::Circle => 1,
            ShapeClass::Triangle => 2,
        }
    }

    /// Whether the pixel offset (dx, dy) from the shape center is inside the
    /// shape of half-extent `r`.
    pub fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            ShapeClass::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeClass::Circle => dx * dx + dy * dy <= r * r,
            // Upright isoceles triangle, apex at the top.
            ShapeClass::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }
}

/// One labeled clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: FrameSequence,
    pub class_id: usize,
}

/// Draws a single frame: shape `class` centered at (cx, cy) with half-extent
/// `r`, +1 inside and -1 outside, clipped at the image border.
pub fn rasterize_frame(
    class: ShapeClass,
    cx: i64,
    cy: i64,
    r: i64,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut px = vec![-1.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if class.contains(x - cx, y - cy, r) {
                px[(y * w as i64 + x) as usize] = 1.0;
            }
        }
    }
    px
}

/// Generates `n_clips` single-channel clips of `f` frames at `h` x `w`
/// pixels. Classes cycle round-robin so every class is present; start
/// position and velocity are drawn from the stream.
pub fn make_synthetic_dataset(
    n_clips: usize,
    f: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Clip>> {
    if n_clips == 0 || f == 0 {
        return Err(Error::EmptyInput("dataset with zero clips or frames"));
    }
    if h < 4 || w < 4 {
        return Err(Error::config(format!("image {h}x{w} too small for shapes")));
    }
    let r = ((h.min(w)) / 5).max(2) as i64;
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let class = ShapeClass::from_class_id(i % N_CLASSES)?;
        let cx = rng.random_range(r..(w as i64 - r));
        let cy = rng.random_range(r..(h as i64 - r));
        let vx = rng.random_range(-2..=2);
        let vy = rng.random_range(-2..=2);
        let mut data = Vec::with_capacity(f * h * w);
        for k in 0..f as i64 {
            data.extend(rasterize_frame(class, cx + k * vx, cy + k * vy, r, h, w));
        }
        let tensor = Tensor::new(vec![f, 1, h, w], data)?;
        clips.push(Clip {
            frames: FrameSequence::new(tensor)?,
            class_id: class.class_id(),
        });
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_velocity_means_identical_frames() {
        // Every frame center is start + k * velocity; velocity 0 keeps it.
        let (cx, cy, vx, vy) = (8i64, 8i64, 0i64, 0i64);
        let f0 = rasterize_frame(ShapeClass::Circle, cx, cy, 3, 16, 16);
        for k in 1..4 {
            let fk = rasterize_frame(ShapeClass::Circle, cx + k * vx, cy + k * vy, 3, 16, 16);
            assert_eq!(f0, fk);
        }
    }

    #[test]
    fn square_occupancy_follows_kinematics() {
        // Start (4, 5), velocity (2, 1): at frame 3 the center is (10, 8)
        // and the occupancy mask is the square around it.
        let (cx, cy, vx, vy, r) = (4i64, 5i64, 2i64, 1i64, 2i64);
        let k = 3i64;
        let frame = rasterize_frame(ShapeClass::Square, cx + k * vx, cy + k * vy, r, 16, 16);
        for y in 0..16i64 {
            for x in 0..16i64 {
                let expect = (x - 10).abs() <= r && (y - 8).abs() <= r;
                let got = frame[(y * 16 + x) as usize] > 0.0;
                assert_eq!(expect, got, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_dataset() {
        let a = make_synthetic_dataset(9, 4, 16, 16, &mut rng::stream(77, 1)).unwrap();
        let b = make_synthetic_dataset(9, 4, 16, 16, &mut rng::stream(77, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn classes_cycle_round_robin() {
        let clips = make_synthetic_dataset(6, 2, 16, 16, &mut rng::stream(5, 1)).unwrap();
        let ids: Vec<usize> = clips.iter().map(|c| c.class_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn values_are_plus_minus_one() {
        let clips = make_synthetic_dataset(3, 2, 16, 16, &mut rng::stream(6, 1)).unwrap();
        for clip in &clips {
            assert!(clip
                .frames
                .tensor()
                .data()
                .iter()
                .all(|&v| v == 1.0 || v == -1.0));
        }
    }
}
