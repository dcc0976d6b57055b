//! LoRA, DoRA, MoRA and DoMoRA adapters over frozen linear maps.
//!
//! The free functions are dense reference implementations on single input
//! vectors. [`AdaptedLinear`] is the same DoMoRA map recorded on a
//! [`Graph`] over a batch of row vectors, with its tensors living in a
//! [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tensor::Tensor;

/// Frequency base of the rotation compression mode.
pub const ROTATION_BASE: f64 = 10000.0;

/// Frozen base weight `W0`, d×k (output × input).
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLinear {
    w0: DMatrix<f64>,
}

impl FrozenLinear {
    pub fn new(w0: DMatrix<f64>) -> Result<Self> {
        if w0.nrows() == 0 || w0.ncols() == 0 {
            return Err(Error::invalid("frozen weight must be at least 1×1"));
        }
        if w0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frozen weight has non-finite entries"));
        }
        Ok(Self { w0 })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.w0
    }
    pub fn d(&self) -> usize {
        self.w0.nrows()
    }
    pub fn k(&self) -> usize {
        self.w0.ncols()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("input", x.len(), self.k())?;
        Ok(&self.w0 * x)
    }
}

/// Trainable DoMoRA tensors: magnitude `m` (k), `B` (d×r), `A` (r×k) and
/// the square matrix `M` (r×r).
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub m: DVector<f64>,
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub square: DMatrix<f64>,
}

impl AdapterParams {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `k + r·(d + k) + r²`.
    pub fn scalar_count(&self) -> usize {
        self.m.len() + self.b.len() + self.a.len() + self.square.len()
    }

    fn check(&self, layer: &FrozenLinear) -> Result<()> {
        let (d, k, r) = (layer.d(), layer.k(), self.rank());
        if self.m.len() != k
            || self.b.shape() != (d, r)
            || self.a.shape() != (r, k)
            || self.square.shape() != (r, r)
        {
            return Err(Error::invalid(format!(
                "adapter shapes m={}, B={:?}, A={:?}, M={:?} do not fit a {d}×{k} layer",
                self.m.len(),
                self.b.shape(),
                self.a.shape(),
                self.square.shape()
            )));
        }
        Ok(())
    }
}

/// Closed-form trainable scalar count of one adapted layer.
pub fn adapter_scalar_count(d: usize, k: usize, r: usize) -> usize {
    k + r * (d + k) + r * r
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionMode {
    /// Sum of length-r segments; decompression tiles and truncates.
    TruncationSum,
    /// Each segment is rotated pairwise by angles `j·base^(−2i/r)` before
    /// summing; decompression applies the inverse rotation per tile.
    Rotation,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionScheme {
    pub mode: CompressionMode,
    pub base: f64,
}

impl Default for CompressionScheme {
    fn default() -> Self {
        Self::truncation_sum()
    }
}

impl CompressionScheme {
    pub fn truncation_sum() -> Self {
        Self {
            mode: CompressionMode::TruncationSum,
            base: ROTATION_BASE,
        }
    }

    pub fn rotation() -> Self {
        Self {
            mode: CompressionMode::Rotation,
            base: ROTATION_BASE,
        }
    }

    /// Rotates the pairs of one length-r segment in place; `sign` −1 gives
    /// the inverse rotation.
    fn rotate_segment(&self, seg: &mut [f64], j: usize, sign: f64) {
        if self.mode == CompressionMode::TruncationSum || j == 0 {
            return;
        }
        let r = seg.len() as f64;
        for i in 0..seg.len() / 2 {
            let theta = sign * j as f64 * self.base.powf(-2.0 * i as f64 / r);
            let (s, c) = theta.sin_cos();
            let (a, b) = (seg[2 * i], seg[2 * i + 1]);
            seg[2 * i] = c * a - s * b;
            seg[2 * i + 1] = s * a + c * b;
        }
    }
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompressionMode::TruncationSum => "truncation-sum",
            CompressionMode::Rotation => "rotation",
        })
    }
}

impl FromStr for CompressionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncation-sum" => Ok(CompressionMode::TruncationSum),
            "rotation" => Ok(CompressionMode::Rotation),
            _ => Err(Error::Config(format!(
                "unknown compression scheme {s:?} (expected truncation-sum or rotation)"
            ))),
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Euclidean norm of every column.
pub fn column_norms(w: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.norm()))
}

/// `W0·x + B·(A·x)`.
pub fn lora_forward(
    layer: &FrozenLinear,
    b: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (d, k) = (layer.d(), layer.k());
    if b.nrows() != d || a.ncols() != k || b.ncols() != a.nrows() {
        return Err(Error::invalid(format!(
            "LoRA factors B={:?}, A={:?} do not fit a {d}×{k} layer",
            b.shape(),
            a.shape()
        )));
    }
    check_len("input", x.len(), k)?;
    Ok(layer.weight() * x + b * (a * x))
}

/// Folds a length-k vector into length r.
pub fn compress(x: &DVector<f64>, r: usize, scheme: &CompressionScheme) -> Result<DVector<f64>> {
    let k = x.len();
    if r == 0 || r > k {
        return Err(Error::invalid(format!("compression rank {r} must lie in 1..={k}")));
    }
    let mut out = DVector::zeros(r);
    let mut seg = vec![0.0; r];
    for j in 0..k.div_ceil(r) {
        for (i, s) in seg.iter_mut().enumerate() {
            *s = x.get(j * r + i).copied().unwrap_or(0.0);
        }
        scheme.rotate_segment(&mut seg, j, 1.0);
        for (o, s) in out.iter_mut().zip(&seg) {
            *o += s;
        }
    }
    Ok(out)
}

/// Expands a length-r vector to length d.
pub fn decompress(z: &DVector<f64>, d: usize, scheme: &CompressionScheme) -> Result<DVector<f64>> {
    let r = z.len();
    if r == 0 || r > d {
        return Err(Error::invalid(format!("decompression rank {r} must lie in 1..={d}")));
    }
    let mut out = DVector::zeros(d);
    let mut seg = vec![0.0; r];
    for j in 0..d.div_ceil(r) {
        seg.copy_from_slice(z.as_slice());
        scheme.rotate_segment(&mut seg, j, -1.0);
        for (i, s) in seg.iter().enumerate() {
            if j * r + i < d {
                out[j * r + i] = *s;
            }
        }
    }
    Ok(out)
}

/// The r×k matrix of [`compress`].
pub fn compression_matrix(k: usize, r: usize, scheme: &CompressionScheme) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(r, k);
    for c in 0..k {
        let col = compress(&DVector::from_fn(k, |i, _| if i == c { 1.0 } else { 0.0 }), r, scheme)?;
        m.set_column(c, &col);
    }
    Ok(m)
}

/// The d×r matrix of [`decompress`].
pub fn decompression_matrix(r: usize, d: usize, scheme: &CompressionScheme) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(d, r);
    for c in 0..r {
        let col = decompress(&DVector::from_fn(r, |i, _| if i == c { 1.0 } else { 0.0 }), d, scheme)?;
        m.set_column(c, &col);
    }
    Ok(m)
}

/// `W0·x + decompress(M·compress(x))`.
pub fn mora_forward(
    layer: &FrozenLinear,
    square: &DMatrix<f64>,
    x: &DVector<f64>,
    scheme: &CompressionScheme,
) -> Result<DVector<f64>> {
    let r = square.nrows();
    if square.ncols() != r || r > layer.d().min(layer.k()) {
        return Err(Error::invalid(format!(
            "square matrix {:?} does not fit a {}×{} layer",
            square.shape(),
            layer.d(),
            layer.k()
        )));
    }
    check_len("input", x.len(), layer.k())?;
    let z = compress(x, r, scheme)?;
    Ok(layer.weight() * x + decompress(&(square * z), layer.d(), scheme)?)
}

/// Column j of the result is `m_j·V_j/‖V_j‖` with `V = W0 + B·A`.
pub fn dora_effective_weight(
    layer: &FrozenLinear,
    m: &DVector<f64>,
    b: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if b.nrows() != layer.d() || a.ncols() != layer.k() || b.ncols() != a.nrows() {
        return Err(Error::invalid("DoRA factor shapes do not fit the layer"));
    }
    check_len("magnitude", m.len(), layer.k())?;
    let mut v = layer.weight() + b * a;
    for (j, mut col) in v.column_iter_mut().enumerate() {
        let n = col.norm();
        if n == 0.0 {
            return Err(Error::DegenerateDirection { column: j });
        }
        col *= m[j] / n;
    }
    Ok(v)
}

pub fn dora_forward(
    layer: &FrozenLinear,
    m: &DVector<f64>,
    b: &DMatrix<f64>,
    a: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("input", x.len(), layer.k())?;
    Ok(dora_effective_weight(layer, m, b, a)? * x)
}

/// DoRA effective weight times `x` plus the MoRA branch, which sits outside
/// the column normalisation.
pub fn domora_forward(
    layer: &FrozenLinear,
    params: &AdapterParams,
    x: &DVector<f64>,
    scheme: &CompressionScheme,
) -> Result<DVector<f64>> {
    params.check(layer)?;
    check_len("input", x.len(), layer.k())?;
    let w = dora_effective_weight(layer, &params.m, &params.b, &params.a)?;
    let z = compress(x, params.rank(), scheme)?;
    Ok(w * x + decompress(&(&params.square * z), layer.d(), scheme)?)
}

/// `m = ‖W0‖_c`, `B = 0`, `M = 0`, `A` seeded uniform in `±1/√k`.
pub fn init_adapter(layer: &FrozenLinear, r: usize, seed: u64) -> Result<AdapterParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_adapter_with(layer, r, &mut rng)
}

pub fn init_adapter_with<R: Rng + ?Sized>(layer: &FrozenLinear, r: usize, rng: &mut R) -> Result<AdapterParams> {
    let (d, k) = (layer.d(), layer.k());
    if r == 0 || r > d.min(k) {
        return Err(Error::invalid(format!("rank {r} must lie in 1..={}", d.min(k))));
    }
    let bound = 1.0 / (k as f64).sqrt();
    let a = DMatrix::from_fn(r, k, |_, _| rng.random_range(-bound..=bound));
    Ok(AdapterParams {
        m: column_norms(layer.weight()),
        b: DMatrix::zeros(d, r),
        a,
        square: DMatrix::zeros(r, r),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankPolicy {
    /// Linear from the base rank down to `max(1, base/2)` across depth.
    Linear,
    Constant,
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankPolicy::Linear => "linear",
            RankPolicy::Constant => "constant",
        })
    }
}

impl FromStr for RankPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RankPolicy::Linear),
            "constant" => Ok(RankPolicy::Constant),
            _ => Err(Error::Config(format!(
                "unknown rank policy {s:?} (expected linear or constant)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankVector(pub Vec<usize>);

impl RankVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Checks each rank against `min(d, k)` of its layer.
    pub fn check_against(&self, max_ranks: &[usize]) -> Result<()> {
        if self.0.len() != max_ranks.len() {
            return Err(Error::Config(format!(
                "rank vector has {} entries but the model has {} adapted blocks",
                self.0.len(),
                max_ranks.len()
            )));
        }
        for (i, (&r, &max)) in self.0.iter().zip(max_ranks).enumerate() {
            if r == 0 || r > max {
                return Err(Error::Config(format!("rank {r} of block {i} must lie in 1..={max}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RankVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

pub fn rank_vector(num_layers: usize, base_rank: usize, policy: RankPolicy) -> Result<RankVector> {
    if num_layers == 0 || base_rank == 0 {
        return Err(Error::Config("rank vector needs at least one layer and a positive base rank".into()));
    }
    if num_layers == 1 || policy == RankPolicy::Constant {
        return Ok(RankVector(vec![base_rank; num_layers]));
    }
    let start = base_rank as f64;
    let end = (base_rank as f64 / 2.0).max(1.0);
    let ranks = (0..num_layers)
        .map(|l| {
            let t = l as f64 / (num_layers - 1) as f64;
            ((start + (end - start) * t).round() as usize).max(1)
        })
        .collect();
    Ok(RankVector(ranks))
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    Tensor::from_vec(&[r, c], (0..r * c).map(|i| m[(i / c, i % c)]).collect())
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// A frozen projection with a DoMoRA adapter, applied to the rows of a
/// token matrix: `Y = X·W'ᵀ + X·Cᵀ·Mᵀ·Dᵀ` where `C` and `D` are the fixed
/// compression and decompression matrices.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub name: String,
    pub w0: ParamId,
    pub m: ParamId,
    pub b: ParamId,
    pub a: ParamId,
    pub square: ParamId,
    pub rank: usize,
    pub scheme: CompressionScheme,
    compress: Tensor,
    decompress: Tensor,
}

impl AdaptedLinear {
    /// Registers `<name>.{m,A,B,M}` next to the frozen weight `w0` (d×k) in
    /// the store, initialised by [`init_adapter_with`].
    pub fn inject<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w0: ParamId,
        rank: usize,
        scheme: CompressionScheme,
        rng: &mut R,
    ) -> Result<Self> {
        let layer = FrozenLinear::new(to_dmatrix(store.value(w0)))?;
        let p = init_adapter_with(&layer, rank, rng)?;
        let (d, k) = (layer.d(), layer.k());
        let trainable = |store: &mut ParamStore, suffix: &str, t: Tensor| {
            store.add(format!("{name}.{suffix}"), t, true, ParamRole::Adapter)
        };
        let m = trainable(store, "m", Tensor::from_vec(&[k], p.m.iter().copied().collect()));
        let a = trainable(store, "A", to_tensor(&p.a));
        let b = trainable(store, "B", to_tensor(&p.b));
        let square = trainable(store, "M", to_tensor(&p.square));
        Ok(Self {
            name: name.to_string(),
            w0,
            m,
            b,
            a,
            square,
            rank,
            scheme,
            compress: to_tensor(&compression_matrix(k, rank, &scheme)?),
            decompress: to_tensor(&decompression_matrix(rank, d, &scheme)?),
        })
    }

    pub fn d(&self) -> usize {
        self.decompress.rows()
    }
    pub fn k(&self) -> usize {
        self.compress.cols()
    }

    /// Current tensors as dense reference types.
    pub fn snapshot(&self, store: &ParamStore) -> Result<(FrozenLinear, AdapterParams)> {
        let layer = FrozenLinear::new(to_dmatrix(store.value(self.w0)))?;
        let params = AdapterParams {
            m: DVector::from_column_slice(store.value(self.m).data()),
            b: to_dmatrix(store.value(self.b)),
            a: to_dmatrix(store.value(self.a)),
            square: to_dmatrix(store.value(self.square)),
        };
        Ok((layer, params))
    }

    /// Applies the adapted map to every row of `x` (n×k), giving n×d.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w0 = g.param(store, self.w0);
        let m = g.param(store, self.m);
        let b = g.param(store, self.b);
        let a = g.param(store, self.a);
        let square = g.param(store, self.square);
        let ba = g.matmul(b, a);
        let v = g.add(w0, ba);
        let norms = g.col_norms(v);
        if let Some(j) = g.value(norms).data().iter().position(|n| *n == 0.0) {
            return Err(Error::DegenerateDirection { column: j });
        }
        let s = g.div(m, norms);
        let w = g.mul_cols(v, s);
        let main = g.matmul_nt(x, w);
        let c = g.constant(self.compress.clone());
        let dm = g.constant(self.decompress.clone());
        let z = g.matmul_nt(x, c);
        let z = g.matmul_nt(z, square);
        let side = g.matmul_nt(z, dm);
        Ok(g.add(main, side))
    }
}
