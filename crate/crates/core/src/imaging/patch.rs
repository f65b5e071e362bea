use super::RasterImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a `p x p` patch tiling; tokens are numbered row-major over
/// the grid and each token flattens its patch as `(dy, dx, channel)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::dim(
                "patchify",
                format!("patch {patch} does not divide {height}x{width}"),
            ));
        }
        Ok(PatchGrid {
            patch,
            rows: height / patch,
            cols: width / patch,
            channels,
        })
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }
}

/// `[H, W, C]` tensor to `[N, p*p*C]` tokens.
pub fn patchify_tensor(t: &Tensor, patch: usize) -> Result<(Tensor, PatchGrid)> {
    let (h, w, c) = match t.shape()[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::dim("patchify", format!("expected [H, W, C], got {:?}", t.shape()))),
    };
    let grid = PatchGrid::new(h, w, c, patch)?;
    let row_len = patch * c;
    let mut out = Vec::with_capacity(t.numel());
    let src = t.data();
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            for dy in 0..patch {
                let start = ((gr * patch + dy) * w + gc * patch) * c;
                out.extend_from_slice(&src[start..start + row_len]);
            }
        }
    }
    Ok((Tensor::from_parts(vec![grid.tokens(), grid.token_dim()], out), grid))
}

/// Inverse of [`patchify_tensor`].
pub fn unpatchify_tensor(tokens: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let (n, d) = tokens.dims2("unpatchify")?;
    if n != grid.tokens() || d != grid.token_dim() {
        return Err(Error::dim(
            "unpatchify",
            format!("tokens {n}x{d} vs grid {}x{}", grid.tokens(), grid.token_dim()),
        ));
    }
    let (p, c, w) = (grid.patch, grid.channels, grid.width());
    let row_len = p * c;
    let mut out = vec![0.0; tokens.numel()];
    let src = tokens.data();
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let tok = &src[(gr * grid.cols + gc) * d..(gr * grid.cols + gc + 1) * d];
            for dy in 0..p {
                let start = ((gr * p + dy) * w + gc * p) * c;
                out[start..start + row_len].copy_from_slice(&tok[dy * row_len..(dy + 1) * row_len]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid.height(), w, c], out))
}

pub fn patchify(img: &RasterImage, patch: usize) -> Result<(Tensor, PatchGrid)> {
    patchify_tensor(&img.to_tensor(), patch)
}

pub fn unpatchify(tokens: &Tensor, grid: &PatchGrid) -> Result<RasterImage> {
    RasterImage::from_tensor(&unpatchify_tensor(tokens, grid)?)
}
