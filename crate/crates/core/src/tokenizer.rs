//! Non-overlapping 3D patch tokenization with learnable positional embeddings.
//!
//! Volumes are `Array4` with shape `(L, W, H, C)` in standard layout, so the
//! flat index is `c + C·(x + H·(y + W·z))`: x-fastest voxels with channels
//! innermost. Patches are numbered `gx + gH·(gy + gW·gz)` (grid z-major) and
//! each patch is flattened with the same x-fastest, channel-innermost order.
//! Axes that `M` does not divide are zero-padded at the far end.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::patch_select::token_geometry;
use crate::volume_io::LabelVolume;

pub const INIT_STD: f64 = 0.02;
const TOKEN_MAGIC: &[u8; 4] = b"PTOK";

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad token file magic {0:?}")]
    BadMagic([u8; 4]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Single-channel real volume from a label grid.
pub fn volume_from_labels(vol: &LabelVolume) -> Array4<f64> {
    let [h, w, l] = vol.dims();
    Array4::from_shape_vec((l, w, h, 1), vol.labels().iter().map(|&v| f64::from(v)).collect())
        .expect("label count matches dims")
}

/// `[H, W, L]` of a `(L, W, H, C)` array.
pub fn spatial_dims(volume: &ArrayView4<f64>) -> [usize; 3] {
    let (l, w, h, _) = volume.dim();
    [h, w, l]
}

/// Split into `N × (M³·C)` flattened patches.
pub fn extract_patches(volume: ArrayView4<f64>, patch: usize) -> Array2<f64> {
    assert!(patch >= 1, "patch size must be >= 1");
    let [h, w, l] = spatial_dims(&volume);
    let c = volume.dim().3;
    let geo = token_geometry([h, w, l], patch);
    let [gh, gw, gl] = geo.grid;
    let patch_dim = patch * patch * patch * c;
    let mut out = Array2::zeros((geo.token_count, patch_dim));

    for gz in 0..gl {
        for gy in 0..gw {
            for gx in 0..gh {
                let n = gx + gh * (gy + gw * gz);
                let mut row = out.row_mut(n);
                let row = row.as_slice_mut().expect("rows are contiguous");
                for pz in 0..patch {
                    let z = gz * patch + pz;
                    if z >= l {
                        continue;
                    }
                    for py in 0..patch {
                        let y = gy * patch + py;
                        if y >= w {
                            continue;
                        }
                        for px in 0..patch {
                            let x = gx * patch + px;
                            if x >= h {
                                continue;
                            }
                            let base = c * (px + patch * (py + patch * pz));
                            for ch in 0..c {
                                row[base + ch] = volume[[z, y, x, ch]];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`extract_patches`]; padding is dropped.
pub fn detokenize(
    patches: ArrayView2<f64>,
    grid: [usize; 3],
    patch: usize,
    original_dims: [usize; 3],
    channels: usize,
) -> Result<Array4<f64>, TokenError> {
    let [h, w, l] = original_dims;
    let expected = token_geometry(original_dims, patch);
    if expected.grid != grid {
        return Err(TokenError::ShapeMismatch(format!(
            "grid {grid:?} does not tile dims {original_dims:?} with patch {patch}"
        )));
    }
    let patch_dim = patch * patch * patch * channels;
    if patches.dim() != (expected.token_count, patch_dim) {
        return Err(TokenError::ShapeMismatch(format!(
            "patch matrix is {:?}, expected ({}, {patch_dim})",
            patches.dim(),
            expected.token_count
        )));
    }
    let [gh, gw, _] = grid;
    let mut out = Array4::zeros((l, w, h, channels));
    for z in 0..l {
        for y in 0..w {
            for x in 0..h {
                let n = x / patch + gh * (y / patch + gw * (z / patch));
                let base = channels * (x % patch + patch * (y % patch + patch * (z % patch)));
                for ch in 0..channels {
                    out[[z, y, x, ch]] = patches[[n, base + ch]];
                }
            }
        }
    }
    Ok(out)
}

/// Patch projection `E` and positional table `E_pos`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// `(M³·C) × P`
    pub projection: Array2<f64>,
    /// `N × P`
    pub positional: Array2<f64>,
}

impl EmbeddingParams {
    /// Seeded Gaussian initialization, std [`INIT_STD`].
    pub fn init(patch_dim: usize, tokens: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            projection: crate::init::gaussian(patch_dim, embed_dim, INIT_STD, &mut rng),
            positional: crate::init::gaussian(tokens, embed_dim, INIT_STD, &mut rng),
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn tokens(&self) -> usize {
        self.positional.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.projection.len() + self.positional.len()
    }

    pub fn check(&self, patches: &ArrayView2<f64>) -> Result<(), TokenError> {
        if self.positional.ncols() != self.embed_dim() {
            return Err(TokenError::ShapeMismatch(format!(
                "projection width {} vs positional width {}",
                self.embed_dim(),
                self.positional.ncols()
            )));
        }
        if patches.dim() != (self.tokens(), self.patch_dim()) {
            return Err(TokenError::ShapeMismatch(format!(
                "patches {:?} vs embedding expecting ({}, {})",
                patches.dim(),
                self.tokens(),
                self.patch_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `z₀`, `N × P`
    pub tokens: Array2<f64>,
    pub grid: [usize; 3],
    pub patch_dim: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Tokens as a `(H/M) × (W/M) × (L/M) × P` tensor.
    pub fn to_grid_tensor(&self) -> Array4<f64> {
        let [gh, gw, gl] = self.grid;
        let p = self.embed_dim();
        let zyx = self
            .tokens
            .to_shape((gl, gw, gh, p))
            .expect("token count matches grid")
            .to_owned();
        zyx.permuted_axes([2, 1, 0, 3]).as_standard_layout().to_owned()
    }
}

/// `z₀ = patches · E + E_pos`.
pub fn embed(patches: ArrayView2<f64>, params: &EmbeddingParams, grid: [usize; 3]) -> Result<TokenSequence, TokenError> {
    params.check(&patches)?;
    if grid.iter().product::<usize>() != params.tokens() {
        return Err(TokenError::ShapeMismatch(format!("grid {grid:?} holds {} tokens", params.tokens())));
    }
    let tokens = patches.dot(&params.projection) + &params.positional;
    Ok(TokenSequence { tokens, grid, patch_dim: params.patch_dim() })
}

/// Writes `PTOK`, u32 N, u32 P, then f64 row-major, all little-endian.
pub fn write_token_matrix<W: Write>(mut out: W, tokens: &Array2<f64>) -> Result<(), TokenError> {
    let (n, p) = tokens.dim();
    let narrow = |v: usize| u32::try_from(v).map_err(|_| TokenError::ShapeMismatch(format!("{v} exceeds u32")));
    out.write_all(TOKEN_MAGIC)?;
    out.write_u32::<LittleEndian>(narrow(n)?)?;
    out.write_u32::<LittleEndian>(narrow(p)?)?;
    for v in tokens.iter() {
        out.write_f64::<LittleEndian>(*v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_token_matrix<R: Read>(mut input: R) -> Result<Array2<f64>, TokenError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TOKEN_MAGIC {
        return Err(TokenError::BadMagic(magic));
    }
    let n = input.read_u32::<LittleEndian>()? as usize;
    let p = input.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::new();
    for _ in 0..n * p {
        data.push(input.read_f64::<LittleEndian>()?);
    }
    Ok(Array2::from_shape_vec((n, p), data).expect("length is n*p"))
}

/// Number of voxels covered by all patches (the padded volume).
pub fn covered_voxels(patches: &Array2<f64>, channels: usize) -> usize {
    patches.len_of(Axis(0)) * patches.len_of(Axis(1)) / channels
}

/// The first `P` columns of an identity map, zero-padded when `P > M³·C`.
pub fn identity_projection(patch_dim: usize, embed_dim: usize) -> Array2<f64> {
    let mut e = Array2::zeros((patch_dim, embed_dim));
    let k = patch_dim.min(embed_dim);
    e.slice_mut(s![..k, ..k]).assign(&Array2::eye(k));
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_volume(dims: [usize; 3], c: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h, w, l] = dims;
        let flat = crate::init::gaussian(1, h * w * l * c, 1.0, &mut rng);
        Array4::from_shape_vec((l, w, h, c), flat.into_raw_vec_and_offset().0).unwrap()
    }

    #[test]
    fn single_patch_is_flattened_volume() {
        let v = seeded_volume([2, 2, 2], 1, 1);
        let p = extract_patches(v.view(), 2);
        assert_eq!(p.dim(), (1, 8));
        assert_eq!(p.row(0).to_vec(), v.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn eight_patches_round_trip() {
        let v = seeded_volume([4, 4, 4], 1, 2);
        let p = extract_patches(v.view(), 2);
        assert_eq!(p.dim(), (8, 8));
        // patch 1 is gx=1: voxels x in 2..4 of the first 2×2×2 block
        assert_eq!(p[[1, 0]], v[[0, 0, 2, 0]]);
        assert_eq!(p[[2, 0]], v[[0, 2, 0, 0]]);
        assert_eq!(p[[4, 0]], v[[2, 0, 0, 0]]);
        let back = detokenize(p.view(), [2, 2, 2], 2, [4, 4, 4], 1).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn padded_round_trip() {
        let v = seeded_volume([5, 5, 5], 2, 3);
        let p = extract_patches(v.view(), 2);
        assert_eq!(p.dim(), (27, 16));
        assert_eq!(covered_voxels(&p, 2), 216);
        let back = detokenize(p.view(), [3, 3, 3], 2, [5, 5, 5], 2).unwrap();
        assert_eq!(back, v);
        // padding voxels are zero and add nothing to the sum
        assert!((p.sum() - v.sum()).abs() < 1e-12);
    }

    #[test]
    fn detokenize_shape_errors() {
        let p = Array2::zeros((8, 8));
        assert!(matches!(detokenize(p.view(), [2, 2, 1], 2, [4, 4, 4], 1), Err(TokenError::ShapeMismatch(_))));
        assert!(matches!(detokenize(p.view(), [2, 2, 2], 2, [4, 4, 4], 2), Err(TokenError::ShapeMismatch(_))));
    }

    #[test]
    fn identity_projection_passes_patches() {
        let v = seeded_volume([4, 4, 4], 1, 4);
        let p = extract_patches(v.view(), 2);
        let params = EmbeddingParams { projection: identity_projection(8, 5), positional: Array2::zeros((8, 5)) };
        let t = embed(p.view(), &params, [2, 2, 2]).unwrap();
        assert_eq!(t.tokens, p.slice(s![.., ..5]));
        let wide = EmbeddingParams { projection: identity_projection(8, 10), positional: Array2::zeros((8, 10)) };
        let t = embed(p.view(), &wide, [2, 2, 2]).unwrap();
        assert_eq!(t.tokens.slice(s![.., ..8]), p);
        assert!(t.tokens.slice(s![.., 8..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_patches_give_positional_table() {
        let params = EmbeddingParams::init(8, 3, 4, 9);
        let t = embed(Array2::zeros((3, 8)).view(), &params, [3, 1, 1]).unwrap();
        assert_eq!(t.tokens, params.positional);
    }

    #[test]
    fn embed_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let patches = crate::init::gaussian(3, 8, 1.0, &mut rng);
        let params = EmbeddingParams::init(8, 3, 4, 12);
        let t = embed(patches.view(), &params, [3, 1, 1]).unwrap();
        for n in 0..3 {
            for p in 0..4 {
                let mut acc = params.positional[[n, p]];
                for k in 0..8 {
                    acc += patches[[n, k]] * params.projection[[k, p]];
                }
                let got = t.tokens[[n, p]];
                assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1e-300), "{got} vs {acc}");
            }
        }
    }

    #[test]
    fn embed_shape_mismatch() {
        let params = EmbeddingParams::init(8, 3, 4, 12);
        assert!(matches!(embed(Array2::zeros((2, 8)).view(), &params, [2, 1, 1]), Err(TokenError::ShapeMismatch(_))));
        assert!(matches!(embed(Array2::zeros((3, 8)).view(), &params, [2, 1, 1]), Err(TokenError::ShapeMismatch(_))));
    }

    #[test]
    fn grid_tensor_layout() {
        let v = seeded_volume([8, 4, 6], 1, 5);
        let p = extract_patches(v.view(), 2);
        let params = EmbeddingParams::init(8, 4 * 2 * 3, 3, 6);
        let t = embed(p.view(), &params, [4, 2, 3]).unwrap();
        let g = t.to_grid_tensor();
        assert_eq!(g.dim(), (4, 2, 3, 3));
        for gx in 0..4 {
            for gy in 0..2 {
                for gz in 0..3 {
                    for k in 0..3 {
                        assert_eq!(g[[gx, gy, gz, k]], t.tokens[[gx + 4 * (gy + 2 * gz), k]]);
                    }
                }
            }
        }
    }

    #[test]
    fn token_file_round_trip_and_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = crate::init::gaussian(5, 3, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_token_matrix(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"PTOK");
        assert_eq!(buf.len(), 12 + 15 * 8);
        assert_eq!(read_token_matrix(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(matches!(read_token_matrix(buf.as_slice()), Err(TokenError::BadMagic(_))));
    }

    proptest! {
        #[test]
        fn embedding_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p1 = crate::init::gaussian(4, 6, 1.0, &mut rng);
            let p2 = crate::init::gaussian(4, 6, 1.0, &mut rng);
            let mut params = EmbeddingParams::init(6, 4, 3, seed + 1);
            params.positional.fill(0.0);
            let grid = [4, 1, 1];
            let lhs = embed((&p1 * a + &p2 * b).view(), &params, grid).unwrap().tokens;
            let rhs = embed(p1.view(), &params, grid).unwrap().tokens * a + embed(p2.view(), &params, grid).unwrap().tokens * b;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn token_count_matches_geometry(h in 1usize..12, w in 1usize..12, l in 1usize..12, m in 1usize..6) {
            let v = Array4::<f64>::zeros((l, w, h, 1));
            let p = extract_patches(v.view(), m);
            let g = token_geometry([h, w, l], m);
            prop_assert_eq!(p.nrows(), g.token_count);
            prop_assert_eq!(covered_voxels(&p, 1), g.padded_dims.iter().product::<usize>());
        }
    }
}
