//! Tube tokenization, fixed 3-D sinusoidal positions and random masking.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token grid `(N_t, N_h, N_w)` of a tubified clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(t, h, w)` coordinates of raster index `i`.
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.h * self.w), (i / self.w) % self.h, i % self.w)
    }
}

/// Geometry shared by tubify/detokenize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TubeGeometry {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tube: usize,
    pub patch: usize,
}

impl TubeGeometry {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.frames, self.channels, self.height, self.width, self.tube, self.patch];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("tube geometry extents must be positive".into()));
        }
        if self.frames % self.tube != 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::InvalidConfig(format!(
                "T={} must be divisible by tube={} and H={}, W={} by patch={}",
                self.frames, self.tube, self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            t: self.frames / self.tube,
            h: self.height / self.patch,
            w: self.width / self.patch,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().len()
    }

    /// Flattened tube length `tube·C·patch²`.
    pub fn token_dim(&self) -> usize {
        self.tube * self.channels * self.patch * self.patch
    }
}

/// `N×D_in` tube tokens in `(t, h, w)` raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub grid: TokenGrid,
}

/// Splits a `[T, C, H, W]` clip into tubes of `tube` frames × `patch²` pixels.
///
/// Within a token the layout is `(dt, c, dy, dx)`.
pub fn tubify<T: Scalar>(clip: &Tensor<T>, tube: usize, patch: usize) -> Result<TokenSequence<T>> {
    let geo = geometry_of(clip, tube, patch)?;
    let grid = geo.grid();
    let d_in = geo.token_dim();
    let (c_n, h, w) = (geo.channels, geo.height, geo.width);
    let src = clip.data();
    let mut out = Vec::with_capacity(src.len());
    for gt in 0..grid.t {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                for dt in 0..tube {
                    let t = gt * tube + dt;
                    for c in 0..c_n {
                        for dy in 0..patch {
                            let y = gh * patch + dy;
                            let row = ((t * c_n + c) * h + y) * w + gw * patch;
                            out.extend_from_slice(&src[row..row + patch]);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::new(vec![grid.len(), d_in], out)?,
        grid,
    })
}

fn geometry_of<T: Scalar>(clip: &Tensor<T>, tube: usize, patch: usize) -> Result<TubeGeometry> {
    let [frames, channels, height, width] = clip.shape() else {
        return Err(Error::InvalidConfig(format!(
            "clip must be [T, C, H, W], got {:?}",
            clip.shape()
        )));
    };
    let geo = TubeGeometry {
        frames: *frames,
        channels: *channels,
        height: *height,
        width: *width,
        tube,
        patch,
    };
    geo.validate()?;
    Ok(geo)
}

/// Inverse of [`tubify`].
pub fn detokenize<T: Scalar>(tokens: &Tensor<T>, geo: &TubeGeometry) -> Result<Tensor<T>> {
    geo.validate()?;
    let grid = geo.grid();
    if tokens.shape() != [grid.len(), geo.token_dim()] {
        return Err(Error::InvalidConfig(format!(
            "expected tokens [{}, {}], got {:?}",
            grid.len(),
            geo.token_dim(),
            tokens.shape()
        )));
    }
    let (c_n, h, w, patch, tube) = (geo.channels, geo.height, geo.width, geo.patch, geo.tube);
    let mut out = vec![T::zero(); geo.frames * c_n * h * w];
    let mut src = tokens.data().chunks_exact(patch);
    for gt in 0..grid.t {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                for dt in 0..tube {
                    let t = gt * tube + dt;
                    for c in 0..c_n {
                        for dy in 0..patch {
                            let y = gh * patch + dy;
                            let row = ((t * c_n + c) * h + y) * w + gw * patch;
                            out[row..row + patch].copy_from_slice(src.next().expect("token length"));
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![geo.frames, c_n, h, w], out)?)
}

/// Fixed sinusoidal embeddings over `(t, h, w)`, one row per raster position.
///
/// The model width is split into three equal even-sized bands; any remainder
/// columns stay zero.
pub fn sinusoidal_positions<T: Scalar>(grid: TokenGrid, d_model: usize) -> Tensor<T> {
    let band = 2 * (d_model / 6);
    let mut data = vec![T::zero(); grid.len() * d_model];
    for i in 0..grid.len() {
        let (t, h, w) = grid.coords(i);
        for (b, pos) in [t, h, w].into_iter().enumerate() {
            for k in 0..band / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / band as f64);
                let angle = pos as f64 * freq;
                data[i * d_model + b * band + 2 * k] = T::lit(angle.sin());
                data[i * d_model + b * band + 2 * k + 1] = T::lit(angle.cos());
            }
        }
    }
    Tensor::raw(vec![grid.len(), d_model], data)
}

/// Disjoint visible/masked index sets over `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

/// `floor(ratio·N)`, tolerant of binary rounding just below an integer.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set.
    pub fn from_masked(n: usize, masked: &[usize], ratio: f64) -> Result<Self> {
        let mut is_masked = vec![false; n];
        for &m in masked {
            if m >= n || std::mem::replace(&mut is_masked[m], true) {
                return Err(Error::InvalidConfig(format!("bad masked index {m} for N={n}")));
            }
        }
        Ok(Self::from_flags(&is_masked, ratio))
    }

    fn from_flags(is_masked: &[bool], ratio: f64) -> Self {
        let (mut visible, mut masked) = (Vec::new(), Vec::new());
        for (i, &m) in is_masked.iter().enumerate() {
            if m {
                masked.push(i)
            } else {
                visible.push(i)
            }
        }
        Self { visible, masked, ratio }
    }

    pub fn all_visible(n: usize) -> Self {
        Self {
            visible: (0..n).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Masks a uniformly random subset of `floor(ratio·N)` tokens.
pub fn random_tube_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    if n == 0 || !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("mask needs N >= 1 and ratio in [0, 1), got N={n}, ratio={ratio}")));
    }
    let count = masked_count(n, ratio);
    let mut flags = vec![false; n];
    for i in rand::seq::index::sample(rng, n, count) {
        flags[i] = true;
    }
    Ok(MaskPlan::from_flags(&flags, ratio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geo(frames: usize, channels: usize, hw: usize, tube: usize, patch: usize) -> TubeGeometry {
        TubeGeometry {
            frames,
            channels,
            height: hw,
            width: hw,
            tube,
            patch,
        }
    }

    #[test]
    fn token_counts() {
        let full = geo(16, 3, 224, 2, 16);
        assert_eq!((full.num_tokens(), full.token_dim()), (1568, 1536));
        let desk = geo(8, 1, 32, 2, 8);
        assert_eq!((desk.num_tokens(), desk.token_dim()), (64, 128));
    }

    #[test]
    fn tubify_layout_and_inverse() {
        let g = geo(4, 2, 4, 2, 2);
        let n = 4 * 2 * 4 * 4;
        let clip = Tensor::<f64>::new(vec![4, 2, 4, 4], (0..n).map(|i| i as f64).collect()).unwrap();
        let seq = tubify(&clip, 2, 2).unwrap();
        assert_eq!(seq.tokens.shape(), &[2 * 2 * 2, 16]);
        // token 1 is (t=0, h=0, w=1); first element is pixel (t=0, c=0, y=0, x=2)
        assert_eq!(seq.tokens.data()[16], 2.0);
        assert_eq!(detokenize(&seq.tokens, &g).unwrap(), clip);
    }

    #[test]
    fn divisibility_rejected() {
        let clip = Tensor::<f32>::zeros(vec![3, 1, 8, 8]);
        assert!(tubify(&clip, 2, 4).is_err());
        let clip = Tensor::<f32>::zeros(vec![4, 1, 8, 6]);
        assert!(tubify(&clip, 2, 4).is_err());
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = random_tube_mask(1568, 0.9, &mut rng).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (1411, 157));
        let p = random_tube_mask(10, 0.0, &mut rng).unwrap();
        assert_eq!(p.visible.len(), 10);
        assert!(random_tube_mask(10, 1.0, &mut rng).is_err());
        assert_eq!(masked_count(100, 0.29), 29);
    }

    #[test]
    fn positions_distinct_per_token() {
        let grid = TokenGrid { t: 4, h: 4, w: 4 };
        let pe: Tensor<f64> = sinusoidal_positions(grid, 96);
        let rows: Vec<&[f64]> = pe.data().chunks(96).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }
}
