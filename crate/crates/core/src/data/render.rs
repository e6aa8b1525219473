use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{SceneDescription, Shape};
use crate::error::{Error, Result};

/// `height × width × 3` image, row-major with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::dim(
                format!("{height}x{width}x3 = {} values", height * width * 3),
                data.len(),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Little-endian f32 bytes, the on-disk representation.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 4 != 0 {
            return Err(Error::Dataset("image blob length is not a multiple of 4".into()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(height, width, data)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_le_bytes()).into()
    }

    /// Mean absolute per-value difference.
    pub fn mean_l1(&self, other: &Image) -> f64 {
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum();
        sum / self.data.len() as f64
    }
}

/// Rasterizes a scene at `resolution × resolution`.
///
/// Each object is drawn inside its own cell; pixels are sampled at their
/// centres with no anti-aliasing so output is exactly reproducible.
pub fn render_scene(scene: &SceneDescription, resolution: usize) -> Result<Image> {
    scene.validate()?;
    if resolution == 0 || resolution % scene.grid_size != 0 {
        return Err(Error::Validation(format!(
            "resolution {resolution} is not divisible by grid size {}",
            scene.grid_size
        )));
    }
    let cell_px = resolution / scene.grid_size;
    let bg = scene.background.rgb();
    let mut data = Vec::with_capacity(resolution * resolution * 3);
    for _ in 0..resolution * resolution {
        data.extend_from_slice(&bg);
    }
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        for py in 0..cell_px {
            for px in 0..cell_px {
                let u = (px as f64 + 0.5) / cell_px as f64;
                let v = (py as f64 + 0.5) / cell_px as f64;
                if covers(obj.shape, u, v) {
                    let y = obj.cell.0 * cell_px + py;
                    let x = obj.cell.1 * cell_px + px;
                    let i = (y * resolution + x) * 3;
                    data[i..i + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    Image::new(resolution, resolution, data)
}

/// Whether a shape covers cell-local coordinates `(u, v) ∈ [0, 1)²`.
fn covers(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => (0.15..=0.85).contains(&u) && (0.15..=0.85).contains(&v),
        Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.38 * 0.38,
        Shape::Triangle => {
            (0.12..=0.88).contains(&v) && (u - 0.5).abs() <= 0.38 * (v - 0.12) / 0.76
        }
    }
}
