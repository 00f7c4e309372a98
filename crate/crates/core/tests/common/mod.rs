#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use setpose::data::{generate_sample, GenConfig, SceneSample};
use setpose::geometry::{CameraIntrinsics, JointSet3D, NUM_JOINTS};
use setpose::hand_model::SkeletonTopology;
use setpose::matching::{match_hands, set_loss_graph, CostMatrix, LossWeights};
use setpose::model::{build_model, forward, forward_graph, ModelConfig};
use setpose::nn::layers::{init_attention, init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp, multi_head_attention};
use setpose::nn::{forward_backward, Graph, NnError, ParamStore, Tensor, Var};
use setpose::train_eval::gt_hands;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest per-coordinate relative difference, with a 1 mm / 1 px floor.
pub fn max_rel(a: &[[f64; 3]; NUM_JOINTS], b: &[[f64; 3]; NUM_JOINTS]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(&x, &y)| rel(x, y, 1.0))
        .fold(0.0, f64::max)
}

pub fn random_camera(r: &mut impl Rng) -> CameraIntrinsics<f64> {
    let w = r.gen_range(16.0..2000.0);
    let h = r.gen_range(16.0..2000.0);
    CameraIntrinsics::new(
        r.gen_range(10.0..3000.0),
        r.gen_range(10.0..3000.0),
        r.gen_range(0.0..w),
        r.gen_range(0.0..h),
        w,
        h,
    )
    .unwrap()
}

/// Joints scattered around a random center with `z` in `[1, 1e5]` mm.
pub fn random_pose(r: &mut impl Rng) -> JointSet3D<f64> {
    let z0: f64 = 10f64.powf(r.gen_range(0.0..5.0));
    let spread = (0.2 * z0).min(150.0);
    let mut j = [[0.0; 3]; NUM_JOINTS];
    for p in j.iter_mut() {
        *p = [
            r.gen_range(-2.0..2.0) * z0 + r.gen_range(-spread..spread),
            r.gen_range(-2.0..2.0) * z0 + r.gen_range(-spread..spread),
            (z0 + r.gen_range(-spread..spread)).clamp(1.0, 1e5),
        ];
    }
    JointSet3D::new(j).unwrap()
}

/// A hand-like pose: random bone directions chained along the standard tree.
pub fn random_hand(r: &mut impl Rng, z: f64) -> JointSet3D<f64> {
    let topo = SkeletonTopology::standard();
    let mut j = [[0.0; 3]; NUM_JOINTS];
    j[0] = [r.gen_range(-100.0..100.0), r.gen_range(-100.0..100.0), z];
    for &(p, c) in topo.edges() {
        let len = r.gen_range(10.0..90.0);
        let d = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0f64)];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-3);
        j[c] = [j[p][0] + len * d[0] / n, j[p][1] + len * d[1] / n, j[p][2] + len * d[2] / n];
    }
    JointSet3D::new(j).unwrap()
}

pub fn random_costs(r: &mut impl Rng, rows: usize, cols: usize) -> CostMatrix<f64> {
    let v = (0..rows * cols).map(|_| r.gen_range(-10.0..10.0)).collect();
    CostMatrix::new(rows, cols, v).unwrap()
}

/// Minimum over every injective row-to-column map, summing in row order;
/// the first minimum in lexicographic order wins.
pub fn brute_force(c: &CostMatrix<f64>) -> (f64, Vec<usize>) {
    fn go(c: &CostMatrix<f64>, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if row == c.rows() {
            let total = cur.iter().enumerate().fold(0.0, |s, (r, &k)| s + c.get(r, k));
            if total < best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for k in 0..c.cols() {
            if !used[k] {
                used[k] = true;
                cur.push(k);
                go(c, row + 1, used, cur, best);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(c, 0, &mut vec![false; c.cols()], &mut Vec::new(), &mut best);
    if c.rows() == 0 {
        best.0 = 0.0;
    }
    best
}

pub fn random_tensor(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| r.gen_range(-scale..scale))
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares reverse-mode gradients with central differences
/// `(L(θ+h) - L(θ-h)) / 2h`, `h = 1e-5 · max(1, |θ|)`, for every scalar of
/// every parameter. Entries with `|analytic| < 1e-8` are skipped.
pub fn grad_check<F>(store: &ParamStore<f64>, build: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NnError>,
{
    let (_, grads) = forward_backward(store, &build).unwrap();
    let loss_at = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s).unwrap();
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut out = GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0, skipped: 0 };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let analytic = grads.get(name).unwrap().data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            if a.abs() < 1e-8 {
                out.skipped += 1;
                continue;
            }
            let theta = work.values_mut(name).unwrap()[i];
            let h = 1e-5 * theta.abs().max(1.0);
            work.values_mut(name).unwrap()[i] = theta + h;
            let plus = loss_at(&work);
            work.values_mut(name).unwrap()[i] = theta - h;
            let minus = loss_at(&work);
            work.values_mut(name).unwrap()[i] = theta;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel(a, numeric, 0.0);
            out.checked += 1;
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    out
}

/// `sum(x ⊙ c)` for a fixed random `c`, so every output entry gets a
/// distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, NnError> {
    let (r, c) = g.shape(x);
    let w = random_tensor(&mut rng(seed), r, c, 1.0);
    let y = g.mul_const(x, w)?;
    Ok(g.sum(y))
}

pub type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NnError>>;

pub fn store_with(r: &mut impl Rng, entries: &[(&str, usize, usize, f64)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for &(name, rows, cols, scale) in entries {
        s.insert(name, random_tensor(r, rows, cols, scale)).unwrap();
    }
    s
}

/// One isolated case per operation and layer, on shapes drawn from `seed`.
pub fn layer_cases(seed: u64) -> Vec<(&'static str, ParamStore<f64>, Build)> {
    let mut r = rng(seed);
    let n = r.gen_range(1..5);
    let k = r.gen_range(1..6);
    let m = r.gen_range(1..5);
    let heads = r.gen_range(1..3);
    let d = 2 * heads * r.gen_range(1..3);
    let mut cases: Vec<(&'static str, ParamStore<f64>, Build)> = Vec::new();

    let s = store_with(&mut r, &[("a", n, k, 1.0), ("b", k, m, 1.0)]);
    cases.push(("matmul", s, Box::new(|g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.matmul(a, b)?;
        project(g, y, 1)
    })));
    let s = store_with(&mut r, &[("a", n, k, 1.0), ("b", m, k, 1.0)]);
    cases.push(("matmul_bt", s, Box::new(|g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let y = g.matmul_bt(a, b)?;
        project(g, y, 2)
    })));
    let s = store_with(&mut r, &[("a", n, k, 1.0), ("b", n, k, 1.0), ("row", 1, k, 1.0)]);
    cases.push(("elementwise", s, Box::new(|g, s| {
        let (a, b, row) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "row")?);
        let x = g.add(a, b)?;
        let y = g.sub(x, b)?;
        let z = g.mul(y, a)?;
        let z = g.add_row(z, row)?;
        let z = g.mul_row(z, row)?;
        let z = g.scale(z, 0.7);
        let t = g.transpose(z);
        project(g, t, 3)
    })));
    let s = store_with(&mut r, &[("a", n, k, 2.0)]);
    cases.push(("gelu", s, Box::new(|g, s| {
        let a = g.param(s, "a")?;
        let y = g.gelu(a);
        project(g, y, 4)
    })));
    cases.push(("sigmoid", store_with(&mut r, &[("a", n, k, 4.0)]), Box::new(|g, s| {
        let a = g.param(s, "a")?;
        let y = g.sigmoid(a);
        project(g, y, 5)
    })));
    // Kinked operations are checked away from their kinks.
    let mut s = store_with(&mut r, &[("a", n, k, 1.0)]);
    for v in s.values_mut("a").unwrap() {
        *v += 0.2 * v.signum();
    }
    cases.push(("relu_abs", s, Box::new(|g, s| {
        let a = g.param(s, "a")?;
        let y = g.relu(a);
        let z = g.abs(a);
        let w = g.add(y, z)?;
        project(g, w, 6)
    })));
    cases.push(("softmax_rows", store_with(&mut r, &[("a", n, k + 1, 3.0)]), Box::new(|g, s| {
        let a = g.param(s, "a")?;
        let y = g.softmax_rows(a);
        project(g, y, 7)
    })));
    cases.push(("log_softmax_rows", store_with(&mut r, &[("a", n, k + 1, 3.0)]), Box::new(|g, s| {
        let a = g.param(s, "a")?;
        let y = g.log_softmax_rows(a);
        project(g, y, 8)
    })));
    let kk = k + 1;
    cases.push(("slice_concat_permute", store_with(&mut r, &[("a", n, kk, 1.0), ("b", n, 2, 1.0)]), Box::new(move |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let left = g.slice_cols(a, 1, kk - 1)?;
        let c = g.concat_cols(&[b, left, b])?;
        let perm: Vec<usize> = (0..g.shape(c).0).rev().collect();
        let p = g.permute_rows(c, &perm)?;
        project(g, p, 9)
    })));

    let mut s = store_with(&mut r, &[("x", n, k, 1.0)]);
    init_linear(&mut s, &mut r, "lin", k, m).unwrap();
    randomize(&mut s, "lin.bias", &mut r);
    cases.push(("linear", s, Box::new(|g, s| {
        let x = g.param(s, "x")?;
        let y = linear(g, s, "lin", x)?;
        project(g, y, 10)
    })));
    let kn = k + 2;
    let mut s = store_with(&mut r, &[("x", n, kn, 2.0)]);
    init_layer_norm(&mut s, "ln", kn).unwrap();
    randomize(&mut s, "ln.gamma", &mut r);
    randomize(&mut s, "ln.beta", &mut r);
    cases.push(("layer_norm", s, Box::new(|g, s| {
        let x = g.param(s, "x")?;
        let y = layer_norm(g, s, "ln", x)?;
        project(g, y, 11)
    })));
    let mut s = store_with(&mut r, &[("x", n, k, 1.0)]);
    init_mlp(&mut s, &mut r, "mlp", &[k, 5, 4, m]).unwrap();
    cases.push(("mlp", s, Box::new(|g, s| {
        let x = g.param(s, "x")?;
        let y = mlp(g, s, "mlp", 3, x)?;
        project(g, y, 12)
    })));
    let lq = r.gen_range(1..4);
    let lk = r.gen_range(1..5);
    let mut s = store_with(&mut r, &[("q", lq, d, 1.0), ("k", lk, d, 1.0), ("v", lk, d, 1.0)]);
    init_attention(&mut s, &mut r, "attn", d).unwrap();
    cases.push(("attention", s, Box::new(move |g, s| {
        let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
        let y = multi_head_attention(g, s, "attn", q, k, v, heads)?;
        project(g, y, 13)
    })));
    cases
}

pub fn randomize(s: &mut ParamStore<f64>, name: &str, r: &mut impl Rng) {
    for v in s.values_mut(name).unwrap() {
        *v += r.gen_range(-0.5..0.5);
    }
}

pub fn two_hand_sample(cfg: &GenConfig) -> SceneSample {
    let topo = SkeletonTopology::standard();
    (0..)
        .map(|i| generate_sample(cfg, &topo, i).unwrap())
        .find(|s| s.hands.len() == 2)
        .unwrap()
}

/// Finite-difference check of the set loss through the whole tiny model,
/// with the matching fixed at the initial parameters.
pub fn full_model_check(seed: u64) -> GradCheck {
    let cfg = ModelConfig::tiny();
    let params = build_model::<f64>(&cfg, seed).unwrap();
    let sample = two_hand_sample(&GenConfig::default());
    let gts = gt_hands(&sample, &cfg);
    let w = LossWeights::default();
    let assignment = match_hands(&forward(&params, &sample.image, &cfg).unwrap(), &gts, &w).unwrap();
    let shape = |e: String| NnError::Shape(e);
    grad_check(&params, |g, s| {
        let det = forward_graph(g, s, &cfg, &sample.image).map_err(|e| shape(e.to_string()))?;
        let loss = set_loss_graph(g, det, &gts, &assignment, &w).map_err(|e| shape(e.to_string()))?;
        Ok(loss.total)
    })
}
