//! 3D volumes and the `vol-f32-v1` on-disk format.
//!
//! A volume is a raw little-endian `f32` payload in z-major order plus a
//! sidecar text header:
//!
//! ```text
//! vol-f32-v1
//! <D> <H> <W>
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_FORMAT: &str = "vol-f32-v1";

/// Upper bound on voxels accepted from a header.
pub const MAX_VOXELS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n = voxel_count(dims)?;
        if data.len() != n {
            return Err(Error::Input(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn header_text(&self) -> String {
        let [d, h, w] = self.dims;
        format!("{VOLUME_FORMAT}\n{d} {h} {w}\n")
    }

    pub fn payload(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

fn voxel_count(dims: [usize; 3]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| if d == 0 { None } else { acc.checked_mul(d) })
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| Error::Input(format!("invalid volume dimensions {dims:?}")))
}

/// Parses a `vol-f32-v1` sidecar header into `[D, H, W]`.
pub fn parse_volume_header(text: &str) -> Result<[usize; 3]> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(VOLUME_FORMAT) {
        return Err(Error::Input(format!("volume header must start with `{VOLUME_FORMAT}`")));
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| Error::Input("volume header is missing dimensions".into()))?;
    let dims: Vec<usize> = dims_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Input(format!("bad volume dimensions `{dims_line}`")))?;
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Input("trailing content in volume header".into()));
    }
    let dims: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::Input(format!("volume header needs 3 dimensions, got `{dims_line}`")))?;
    voxel_count(dims)?;
    Ok(dims)
}

/// Decodes a payload against its header; every voxel must be finite.
pub fn decode_volume(header: &str, payload: &[u8]) -> Result<Volume> {
    let dims = parse_volume_header(header)?;
    let n = voxel_count(dims)?;
    if payload.len() != n * 4 {
        return Err(Error::Input(format!(
            "volume payload is {} bytes, header {dims:?} needs {}",
            payload.len(),
            n * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("volume contains non-finite voxels".into()));
    }
    Volume::new(dims, data)
}

/// Token grid produced by cutting `dims` into cubes of side `patch`.
pub fn patch_grid(dims: [usize; 3], patch: usize) -> Result<[usize; 3]> {
    if patch == 0 || dims.iter().any(|&d| d % patch != 0) {
        return Err(Error::Config(format!(
            "patch size {patch} does not divide volume {dims:?}"
        )));
    }
    Ok(dims.map(|d| d / patch))
}

/// Flattens non-overlapping cubic patches into an `N × patch³` matrix.
/// Patches and the voxels within them are both in z-major order.
pub fn patchify(volume: &Volume, patch: usize) -> Result<Tensor> {
    let [gd, gh, gw] = patch_grid(volume.dims, patch)?;
    let p3 = patch * patch * patch;
    let mut out = Vec::with_capacity(gd * gh * gw * p3);
    for pz in 0..gd {
        for py in 0..gh {
            for px in 0..gw {
                for dz in 0..patch {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out.push(volume.at(pz * patch + dz, py * patch + dy, px * patch + dx) as f64);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![gd * gh * gw, p3], out)?)
}

/// Gather index that merges each `factor³` block of tokens on `grid` into one
/// token of width `factor³ · channels`.
pub fn merge_index(grid: [usize; 3], channels: usize, factor: usize) -> Result<(Vec<usize>, [usize; 3])> {
    let out_grid = patch_grid(grid, factor)?;
    let [_, gh, gw] = grid;
    let [od, oh, ow] = out_grid;
    let mut index = Vec::with_capacity(grid.iter().product::<usize>() * channels);
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let src = ((z * factor + dz) * gh + (y * factor + dy)) * gw + (x * factor + dx);
                            index.extend((0..channels).map(|c| src * channels + c));
                        }
                    }
                }
            }
        }
    }
    Ok((index, out_grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip() {
        let v = Volume::zeros([4, 6, 2]);
        assert_eq!(parse_volume_header(&v.header_text()).unwrap(), [4, 6, 2]);
        let back = decode_volume(&v.header_text(), &v.payload()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for bad in [
            "",
            "vol-f32-v2\n1 1 1\n",
            "vol-f32-v1\n",
            "vol-f32-v1\n1 1\n",
            "vol-f32-v1\n1 0 1\n",
            "vol-f32-v1\n1 1 1 1\n",
            "vol-f32-v1\n-1 1 1\n",
            "vol-f32-v1\n99999 99999 99999\n",
            "vol-f32-v1\n1 1 1\nextra\n",
        ] {
            assert!(parse_volume_header(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn payload_length_and_finiteness_checked() {
        let h = "vol-f32-v1\n1 1 2\n";
        assert!(decode_volume(h, &[0; 4]).is_err());
        let mut nan = 1.0f32.to_le_bytes().to_vec();
        nan.extend(f32::NAN.to_le_bytes());
        assert!(decode_volume(h, &nan).is_err());
    }

    #[test]
    fn patch_count_arithmetic() {
        let p = patchify(&Volume::zeros([32, 32, 32]), 4).unwrap();
        assert_eq!(p.shape(), &[512, 64]);
        assert!(patchify(&Volume::zeros([32, 30, 32]), 4).is_err());
    }

    #[test]
    fn patch_layout_is_z_major() {
        let data: Vec<f32> = (0..8).map(|i| i as f32).collect();
        let v = Volume::new([2, 2, 2], data).unwrap();
        let p = patchify(&v, 1).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let p = patchify(&v, 2).unwrap();
        assert_eq!(p.shape(), &[1, 8]);
    }

    #[test]
    fn merge_index_groups_neighbours() {
        let (idx, grid) = merge_index([2, 2, 2], 1, 2).unwrap();
        assert_eq!(grid, [1, 1, 1]);
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        let (idx, _) = merge_index([2, 2, 4], 2, 2).unwrap();
        // first output token: tokens (0,0,0),(0,0,1),(0,1,0),... of a 2×2×4 grid
        assert_eq!(&idx[..6], &[0, 1, 2, 3, 8, 9]);
        assert_eq!(idx.len(), 16 * 2);
    }
}
