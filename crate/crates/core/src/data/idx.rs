use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]`, row-major `[count, rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_header(bytes: &[u8], magic: u32, dims: usize, path: &Path) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::format(
            "idx",
            path,
            format!("{} bytes is shorter than the header", bytes.len()),
        ));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::format(
            "idx",
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let sizes: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let payload: usize = sizes.iter().product();
    if bytes.len() != header + payload {
        return Err(Error::format(
            "idx",
            path,
            format!("payload is {} bytes, header declares {payload}", bytes.len() - header),
        ));
    }
    Ok(sizes)
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let dims = check_header(bytes, IMAGES_MAGIC, 3, path)?;
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: bytes[16..].iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_header(bytes, LABELS_MAGIC, 1, path)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Reads an image file and its label file, checking that the counts agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(IdxImages, Vec<usize>)> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if images.count != labels.len() {
        return Err(Error::format(
            "idx",
            labels_path,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    Ok((images, labels))
}

/// Cuts each image into non-overlapping `patch × patch` tiles, row-major
/// over the tile grid and row-major within a tile: `[B, (H/p)·(W/p), p²]`.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let &[b, h, w] = images.shape() else {
        return Err(Error::shape(
            "patchify",
            format!("expected [B, H, W], got {:?}", images.shape()),
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", format!("patch {patch} does not tile {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for img in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..patch {
                    let row = (img * h + ty * patch + py) * w + tx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, patch * patch], out)
}

impl IdxImages {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.count, self.rows, self.cols], self.pixels.clone())
    }
}

impl super::Dataset {
    /// Patchified IDX images as a token dataset.
    pub fn from_idx(images: &IdxImages, labels: &[usize], patch: usize, num_classes: usize) -> Result<Self> {
        let tokens = patchify(&images.to_tensor()?, patch)?;
        let n = tokens.shape()[1];
        let d = tokens.shape()[2];
        super::Dataset::new(tokens.into_data(), labels.to_vec(), n, d, num_classes)
    }
}
