//! Radius graphs over selected voxels and Gaussian-mixture graph convolution.
//!
//! Each node aggregates over its closed neighborhood `N(i) ∪ {i}`:
//!
//! ```text
//! u_ij   = (p_j - p_i) / R
//! w_m(u) = exp(-½ Σ_k q_mk² (u_k - μ_mk)²)
//! out_i  = ReLU( mean_{j ∈ N(i) ∪ {i}} Σ_m w_m(u_ij) Θ_m f_j + b )
//! ```
//!
//! with learnable kernel means `μ_m`, free precision parameters `q_m`
//! (effective precision `q²`), per-kernel linear maps `Θ_m` and bias `b`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Bound, CustomOp, Init, Linear, ParamId, ParamStore, Real, Tape, Var};
use crate::representations::{VoxelSet, FEATURE_DIM};

/// Closed neighborhoods in CSR form; each node's own entry comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    index: Vec<usize>,
    pseudo: Vec<[f64; 3]>,
}

impl Neighborhoods {
    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn entries(&self) -> usize {
        self.index.len()
    }

    /// `(neighbor index, pseudo-coordinate)` pairs of node `i`, self first.
    pub fn of(&self, i: usize) -> impl Iterator<Item = (usize, [f64; 3])> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.index[r.clone()].iter().copied().zip(self.pseudo[r].iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGraph {
    pub coords: Vec<[u32; 3]>,
    pub features: Vec<[f32; FEATURE_DIM]>,
    /// Unordered edges stored once as `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub radius: f64,
    neighborhoods: Arc<Neighborhoods>,
}

impl VoxelGraph {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn neighborhoods(&self) -> &Arc<Neighborhoods> {
        &self.neighborhoods
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges.binary_search(&key).is_ok()
    }

    /// Node features as a row-major `[K, FEATURE_DIM]` array.
    pub fn feature_matrix<F: Real>(&self) -> Vec<F> {
        self.features
            .iter()
            .flat_map(|f| f.iter().map(|&v| F::from_f64(v as f64)))
            .collect()
    }
}

fn squared_distance(a: [u32; 3], b: [u32; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum()
}

/// Connects every pair of voxels whose cell coordinates lie strictly closer than `radius`.
pub fn build_radius_graph(vs: &VoxelSet, radius: f64) -> Result<VoxelGraph> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!("radius must be positive, got {radius}")));
    }
    let coords: Vec<[u32; 3]> = vs.voxels.iter().map(|v| v.coords()).collect();
    let r2 = radius * radius;
    // Buckets of side ceil(R) cells: any pair closer than R sits in adjacent buckets.
    let side = radius.ceil() as i64;
    let bucket = |c: [u32; 3]| c.map(|v| v as i64 / side);
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, &c) in coords.iter().enumerate() {
        buckets.entry(bucket(c)).or_default().push(i);
    }
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); coords.len()];
    for (i, &c) in coords.iter().enumerate() {
        let b = bucket(c);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dt in -1..=1 {
                    let Some(members) = buckets.get(&[b[0] + dx, b[1] + dy, b[2] + dt]) else {
                        continue;
                    };
                    for &j in members {
                        if j != i && squared_distance(c, coords[j]) < r2 {
                            adjacency[i].push(j);
                        }
                    }
                }
            }
        }
        adjacency[i].sort_unstable();
    }
    let mut edges = Vec::new();
    let mut offsets = vec![0];
    let mut index = Vec::new();
    let mut pseudo = Vec::new();
    for (i, nbrs) in adjacency.iter().enumerate() {
        index.push(i);
        pseudo.push([0.0; 3]);
        for &j in nbrs {
            if i < j {
                edges.push((i, j));
            }
            index.push(j);
            let (a, b) = (coords[i], coords[j]);
            pseudo.push([
                (b[0] as f64 - a[0] as f64) / radius,
                (b[1] as f64 - a[1] as f64) / radius,
                (b[2] as f64 - a[2] as f64) / radius,
            ]);
        }
        offsets.push(index.len());
    }
    edges.sort_unstable();
    Ok(VoxelGraph {
        features: vs.voxels.iter().map(|v| v.features).collect(),
        coords,
        edges,
        radius,
        neighborhoods: Arc::new(Neighborhoods { offsets, index, pseudo }),
    })
}

/// One Gaussian-mixture graph convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct GmmConvLayer {
    /// `[C_in, M·C_out]`; column block `m` is `Θ_m`.
    pub theta: ParamId,
    /// `[M, 3]` kernel means.
    pub mu: ParamId,
    /// `[M, 3]` free precision parameters `q`; effective precision is `q²`.
    pub precision: ParamId,
    pub bias: ParamId,
    pub kernels: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl GmmConvLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernels) as f64).sqrt();
        Self {
            theta: store.add(format!("{name}.theta"), &[c_in, kernels * c_out], Init::Uniform(bound), rng),
            mu: store.add(format!("{name}.mu"), &[kernels, 3], Init::Uniform(1.0), rng),
            precision: store.add(format!("{name}.precision"), &[kernels, 3], Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[c_out], Init::Uniform(bound), rng),
            kernels,
            c_in,
            c_out,
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.theta, self.mu, self.precision, self.bias]
    }
}

/// Kernel weight `w_m(u)` for a single pseudo-coordinate.
pub fn kernel_weight(u: [f64; 3], mu: &[f64], q: &[f64]) -> f64 {
    let s: f64 = (0..3).map(|k| q[k] * q[k] * (u[k] - mu[k]).powi(2)).sum();
    (-0.5 * s).exp()
}

struct GmmAggregate<F: Real> {
    inputs: [Var; 3],
    neighborhoods: Arc<Neighborhoods>,
    weights: Vec<F>,
    kernels: usize,
    c_out: usize,
}

impl<F: Real> CustomOp<F> for GmmAggregate<F> {
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(
        &self,
        values: &dyn Fn(Var) -> Arc<Vec<F>>,
        grad: &[F],
        needs: &[bool],
    ) -> Vec<Option<Vec<F>>> {
        let h = values(self.inputs[0]);
        let mu = values(self.inputs[1]);
        let q = values(self.inputs[2]);
        let (m_count, c_out) = (self.kernels, self.c_out);
        let width = m_count * c_out;
        let need_kernel = needs[1] || needs[2];
        let mut dh = if needs[0] { vec![F::zero(); h.len()] } else { Vec::new() };
        let mut dmu = vec![F::zero(); mu.len()];
        let mut dq = vec![F::zero(); q.len()];
        let nb = &self.neighborhoods;
        for i in 0..nb.nodes() {
            let start = nb.offsets[i];
            let inv = F::one() / F::from_f64((nb.offsets[i + 1] - start) as f64);
            let gi = &grad[i * c_out..(i + 1) * c_out];
            for (e, (j, u)) in nb.of(i).enumerate() {
                let entry = start + e;
                for m in 0..m_count {
                    let w = self.weights[entry * m_count + m];
                    let col = j * width + m * c_out;
                    if needs[0] {
                        let s = inv * w;
                        for (d, &g) in dh[col..col + c_out].iter_mut().zip(gi) {
                            *d += s * g;
                        }
                    }
                    if need_kernel {
                        let dw: F = inv * gi.iter().zip(&h[col..col + c_out]).map(|(&g, &v)| g * v).sum::<F>();
                        let scale = dw * w;
                        for k in 0..3 {
                            let diff = F::from_f64(u[k]) - mu[m * 3 + k];
                            let qk = q[m * 3 + k];
                            dmu[m * 3 + k] += scale * qk * qk * diff;
                            dq[m * 3 + k] -= scale * qk * diff * diff;
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dh),
            needs[1].then_some(dmu),
            needs[2].then_some(dq),
        ]
    }
}

/// Gaussian-weighted mean aggregation of pre-transformed features
/// `h = f Θ : [K, M·C_out]`, producing `[K, C_out]` before bias and activation.
pub fn gmm_aggregate<F: Real>(
    tape: &mut Tape<F>,
    neighborhoods: &Arc<Neighborhoods>,
    h: Var,
    mu: Var,
    precision: Var,
    kernels: usize,
    c_out: usize,
) -> Result<Var> {
    let k = neighborhoods.nodes();
    if tape.shape(h) != [k, kernels * c_out] {
        return Err(Error::DimensionMismatch(format!(
            "gmm aggregate input {:?}, expected [{k}, {}]",
            tape.shape(h),
            kernels * c_out
        )));
    }
    if tape.shape(mu) != [kernels, 3] || tape.shape(precision) != [kernels, 3] {
        return Err(Error::DimensionMismatch("gmm kernel parameters must be [M, 3]".into()));
    }
    let mu_v: Vec<f64> = tape.value(mu).iter().map(|v| v.as_f64()).collect();
    let q_v: Vec<f64> = tape.value(precision).iter().map(|v| v.as_f64()).collect();
    let mut weights = Vec::with_capacity(neighborhoods.entries() * kernels);
    for i in 0..k {
        for (_, u) in neighborhoods.of(i) {
            for m in 0..kernels {
                weights.push(F::from_f64(kernel_weight(u, &mu_v[m * 3..m * 3 + 3], &q_v[m * 3..m * 3 + 3])));
            }
        }
    }
    let hv = tape.value(h);
    let width = kernels * c_out;
    let mut out = vec![F::zero(); k * c_out];
    for i in 0..k {
        let start = neighborhoods.offsets[i];
        let inv = F::one() / F::from_f64((neighborhoods.offsets[i + 1] - start) as f64);
        let oi = &mut out[i * c_out..(i + 1) * c_out];
        for (e, (j, _)) in neighborhoods.of(i).enumerate() {
            for m in 0..kernels {
                let w = weights[(start + e) * kernels + m] * inv;
                let row = &hv[j * width + m * c_out..j * width + (m + 1) * c_out];
                for (o, &v) in oi.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
    }
    let op = GmmAggregate {
        inputs: [h, mu, precision],
        neighborhoods: Arc::clone(neighborhoods),
        weights,
        kernels,
        c_out,
    };
    Ok(tape.custom(vec![k, c_out], out, Box::new(op)))
}

/// One graph convolution: `ReLU(aggregate(f Θ) + b)`.
pub fn gmm_conv<F: Real>(
    tape: &mut Tape<F>,
    p: &Bound,
    graph: &VoxelGraph,
    layer: &GmmConvLayer,
    features: Var,
) -> Result<Var> {
    if tape.shape(features) != [graph.len(), layer.c_in] {
        return Err(Error::DimensionMismatch(format!(
            "gmm_conv features {:?}, expected [{}, {}]",
            tape.shape(features),
            graph.len(),
            layer.c_in
        )));
    }
    let h = tape.matmul(features, p.var(layer.theta))?;
    let agg = gmm_aggregate(
        tape,
        graph.neighborhoods(),
        h,
        p.var(layer.mu),
        p.var(layer.precision),
        layer.kernels,
        layer.c_out,
    )?;
    let biased = tape.add_row_bias(agg, p.var(layer.bias))?;
    Ok(tape.relu(biased))
}

/// Mean over nodes: `[K, d] -> [1, d]`.
pub fn avg_pool<F: Real>(tape: &mut Tape<F>, features: Var) -> Result<Var> {
    tape.mean_rows(features)
}

/// Shape of the voxel encoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VoxelBranchConfig {
    /// Output widths of the stacked convolutions; the last one feeds the projection.
    pub layer_widths: Vec<usize>,
    pub kernels: usize,
    pub radius: f64,
}

/// Radius graph → stacked GMM convolutions → average pool → projection to the model width.
#[derive(Debug, Clone)]
pub struct VoxelBranch {
    pub layers: Vec<GmmConvLayer>,
    pub projection: Linear,
    pub radius: f64,
}

impl VoxelBranch {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &VoxelBranchConfig,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.layer_widths.is_empty() || cfg.kernels == 0 {
            return Err(Error::InvalidConfig("voxel branch needs at least one layer and one kernel".into()));
        }
        let mut c_in = FEATURE_DIM;
        let mut layers = Vec::with_capacity(cfg.layer_widths.len());
        for (l, &c_out) in cfg.layer_widths.iter().enumerate() {
            layers.push(GmmConvLayer::new(store, &format!("{name}.gmm{l}"), c_in, c_out, cfg.kernels, rng));
            c_in = c_out;
        }
        let projection = Linear::new(store, &format!("{name}.proj"), c_in, width, rng);
        Ok(Self {
            layers,
            projection,
            radius: cfg.radius,
        })
    }

    /// Encodes a prebuilt graph into a single `[1, d]` token.
    pub fn forward_graph<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, graph: &VoxelGraph) -> Result<Var> {
        if graph.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut f = tape.constant(graph.feature_matrix(), &[graph.len(), FEATURE_DIM]);
        for layer in &self.layers {
            f = gmm_conv(tape, p, graph, layer, f)?;
        }
        let pooled = avg_pool(tape, f)?;
        self.projection.forward(tape, p, pooled)
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, p: &Bound, voxels: &VoxelSet) -> Result<Var> {
        let graph = build_radius_graph(voxels, self.radius)?;
        self.forward_graph(tape, p, &graph)
    }
}
