//! Finite-difference checks of every tape primitive and of the whole
//! NSG-MoE loss.

use std::sync::Arc;

use nsg_core::graphdata::{generate_synthetic, SyntheticSpec};
use nsg_core::hgnn::{random_features, HgnnConfig};
use nsg_core::numerics::{finite_difference_check, SparseMatrix, Tape, Tensor2, Var};
use nsg_core::rng;
use nsg_core::trainkit::model::{ArchConfig, NsgMoeModel};
use nsg_core::trainkit::{prepare_task, NsgRunner, Task, TaskConfig};

const H: f64 = 1e-6;
const PRIMITIVE_TOL: f64 = 1e-6;

fn flatten(ts: &[Tensor2]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(flat: &[f64], like: &[Tensor2]) -> Vec<Tensor2> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let out = Tensor2::from_vec(t.rows(), t.cols(), flat[at..at + t.len()].to_vec()).unwrap();
            at += t.len();
            out
        })
        .collect()
}

/// Reduces any output to a scalar through a fixed random weighting so that
/// every output entry carries gradient.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = random_features(r, c, &mut rng::stream(seed, "test/weights", 0));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Builds `f(inputs)` on a fresh tape and returns the worst relative error
/// between reverse-mode and central-difference gradients.
fn check(inputs: Vec<Tensor2>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor2> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
        .collect();
    let f = |w: &[f64]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = unflatten(w, &inputs).into_iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).scalar()
    };
    finite_difference_check(f, &flatten(&inputs), &flatten(&analytic), H)
}

fn rand(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    random_features(rows, cols, &mut rng::stream(seed, "test/input", 0))
}

/// Entries bounded away from zero, for kinked primitives.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    rand(rows, cols, seed).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

macro_rules! primitive {
    ($name:ident, [$($input:expr),+], |$tape:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check(vec![$($input),+], |$tape: &mut Tape, $v: &[Var]| {
                let out = $body;
                weighted_sum($tape, out, 99)
            });
            assert!(err < PRIMITIVE_TOL, "{}: relative error {err:e}", stringify!($name));
        }
    };
}

primitive!(matmul, [rand(3, 4, 1), rand(4, 2, 2)], |t, v| t.matmul(v[0], v[1]).unwrap());
primitive!(add, [rand(3, 2, 1), rand(3, 2, 2)], |t, v| t.add(v[0], v[1]).unwrap());
primitive!(sub, [rand(3, 2, 1), rand(3, 2, 2)], |t, v| t.sub(v[0], v[1]).unwrap());
primitive!(add_row, [rand(4, 3, 1), rand(1, 3, 2)], |t, v| t.add_row(v[0], v[1]).unwrap());
primitive!(scale, [rand(3, 3, 1)], |t, v| t.scale(v[0], -1.7));
primitive!(mul, [rand(3, 2, 1), rand(3, 2, 2)], |t, v| t.mul(v[0], v[1]).unwrap());
primitive!(mul_row, [rand(4, 3, 1), rand(1, 3, 2)], |t, v| t.mul_row(v[0], v[1]).unwrap());
primitive!(scale_rows, [rand(4, 3, 1), rand(4, 1, 2)], |t, v| t.scale_rows(v[0], v[1]).unwrap());
primitive!(row_softmax, [rand(3, 4, 1)], |t, v| t.row_softmax(v[0]));
primitive!(relu, [away_from_zero(4, 3, 1)], |t, v| t.relu(v[0]));
primitive!(sigmoid, [rand(4, 3, 1).scale(3.0)], |t, v| t.sigmoid(v[0]));
primitive!(softplus, [rand(4, 3, 1).scale(3.0)], |t, v| t.softplus(v[0]));
primitive!(concat_cols, [rand(3, 2, 1), rand(3, 1, 2), rand(3, 3, 3)], |t, v| t
    .concat_cols(&[v[0], v[1], v[2]])
    .unwrap());
primitive!(slice_cols, [rand(3, 5, 1)], |t, v| t.slice_cols(v[0], 1, 4).unwrap());
primitive!(gather_rows_with_repeats, [rand(4, 3, 1)], |t, v| t
    .gather_rows(v[0], Arc::from(vec![2, 0, 2, 3, 2]))
    .unwrap());
primitive!(sum, [rand(3, 4, 1)], |t, v| t.sum(v[0]));
primitive!(col_sum, [rand(3, 4, 1)], |t, v| t.col_sum(v[0]));
primitive!(transpose, [rand(3, 4, 1)], |t, v| t.transpose(v[0]));
primitive!(reshape, [rand(3, 4, 1)], |t, v| t.reshape(v[0], 2, 6).unwrap());
primitive!(propagate, [rand(4, 3, 1)], |t, v| {
    let op = SparseMatrix::from_triplets(3, 4, &[(0, 1, 0.5), (0, 3, -1.0), (1, 1, 2.0), (2, 0, 0.25), (2, 2, 1.5)]);
    t.propagate(v[0], Arc::new(op)).unwrap()
});
primitive!(center_cols, [rand(5, 3, 1)], |t, v| t.center_cols(v[0]));
primitive!(row_dot, [rand(4, 3, 1), rand(4, 3, 2)], |t, v| t.row_dot(v[0], v[1]).unwrap());
primitive!(topk_softmax, [Tensor2::from_rows(&[vec![0.3, -1.0, 1.2, 0.1], vec![2.0, 0.5, -0.4, 1.1]])], |t, v| t
    .topk_softmax(v[0], 2));
primitive!(cv_squared, [rand(1, 5, 1).map(|x| x + 2.0)], |t, v| t.cv_squared(v[0]));

#[test]
fn softmax_cross_entropy() {
    let err = check(vec![rand(5, 3, 1)], |t, v| {
        t.softmax_cross_entropy(v[0], Arc::from(vec![0, 2, 1, 1, 0]), Arc::from(vec![0, 1, 3, 4]))
            .unwrap()
    });
    assert!(err < PRIMITIVE_TOL, "relative error {err:e}");
}

#[test]
fn bce_with_logits() {
    let err = check(vec![rand(6, 1, 1).scale(3.0)], |t, v| {
        t.bce_with_logits(v[0], Arc::from(vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0])).unwrap()
    });
    assert!(err < PRIMITIVE_TOL, "relative error {err:e}");
}

#[test]
fn load_probability() {
    let eps = Arc::new(rand(4, 3, 3));
    let err = check(vec![rand(4, 3, 1), rand(4, 3, 2)], |t, v| {
        let p = t.load_probability(v[0], v[1], Arc::clone(&eps), 2).unwrap();
        weighted_sum(t, p, 5)
    });
    assert!(err < PRIMITIVE_TOL, "relative error {err:e}");
}

#[test]
fn chained_matmul_softplus_sum() {
    let err = check(vec![rand(3, 4, 1), rand(4, 4, 2), rand(4, 2, 3)], |t, v| {
        let a = t.matmul(v[0], v[1]).unwrap();
        let a = t.softplus(a);
        let b = t.matmul(a, v[2]).unwrap();
        t.sum(b)
    });
    assert!(err < PRIMITIVE_TOL, "relative error {err:e}");
}

// ---------------------------------------------------------------------------
// Whole model

struct Fixture {
    runner: NsgRunner,
    data: nsg_core::trainkit::TaskData,
    cfg: TaskConfig,
    eps: Tensor2,
}

fn fixture(aux_grad_to_input: bool, lambda: f64) -> Fixture {
    let mut spec = SyntheticSpec::new(6, 2, 2, 3, 11);
    spec.intra_class_edge_prob = 0.6;
    spec.inter_class_edge_prob = 0.3;
    let g = generate_synthetic(&spec).unwrap();
    assert!(!g.edges.is_empty());
    let arch = ArchConfig {
        hgnn: HgnnConfig {
            hidden: 4,
            ..HgnnConfig::default()
        },
        n_self: 2,
        n_cross: 2,
        k: 2,
        aux_grad_to_input,
        ..ArchConfig::default()
    };
    let cfg = TaskConfig {
        lambda,
        seed: 4,
        ..TaskConfig::default()
    };
    let data = prepare_task(&g, Task::NodeClassification, cfg.seed).unwrap();
    let mut model = NsgMoeModel::init(&data.dims(), data.out_dim(4), &arch, cfg.seed).unwrap();
    // A zero gate routes identically everywhere; make the routing non-trivial.
    let mut r = rng::stream(5, "test/gate", 0);
    model.gate.w_g = random_features(4, 4, &mut r);
    model.gate.w_n = random_features(4, 4, &mut r);
    let eps = model.draw_noise(12, &mut rng::stream(6, "test/eps", 0));
    let runner = NsgRunner::new(model, &data).unwrap();
    Fixture { runner, data, cfg, eps }
}

impl Fixture {
    fn loss_and_grad(&self) -> (f64, Vec<Tensor2>) {
        let mut tape = Tape::new();
        let step = self
            .runner
            .record_with_noise(&mut tape, &self.data, &self.cfg, 0, self.eps.clone())
            .unwrap();
        tape.backward(step.total).unwrap();
        let grads = step
            .params
            .iter()
            .map(|&p| {
                let (r, c) = tape.shape(p);
                tape.grad(p).cloned().unwrap_or_else(|| Tensor2::zeros(r, c))
            })
            .collect();
        (tape.value(step.total).scalar(), grads)
    }

    fn loss_at(&self, params: Vec<Tensor2>) -> f64 {
        let mut model = self.runner.model.clone();
        model.set_params(params).unwrap();
        let runner = NsgRunner::with_trees(model, &self.data, self.runner.trees.clone()).unwrap();
        let mut tape = Tape::new();
        let step = runner
            .record_with_noise(&mut tape, &self.data, &self.cfg, 0, self.eps.clone())
            .unwrap();
        tape.value(step.total).scalar()
    }
}

#[test]
fn whole_model_gradient_matches_finite_differences() {
    let fx = fixture(true, 1.0);
    let (loss, grads) = fx.loss_and_grad();
    assert!(loss.is_finite());
    let values = fx.runner.model.param_values();
    let err = finite_difference_check(
        |w| fx.loss_at(unflatten(w, &values)),
        &flatten(&values),
        &flatten(&grads),
        H,
    );
    assert!(err < 1e-4, "whole-model relative error {err:e}");
}

/// With the default routing-only balancing loss, the gate weights still
/// see the exact gradient of the full objective.
#[test]
fn routing_only_aux_loss_gives_exact_gate_gradient() {
    let fx = fixture(false, 1.0);
    let (_, grads) = fx.loss_and_grad();
    let values = fx.runner.model.param_values();
    let gate_at = values.len() - fx.runner.model.merge.params().len() - 2;
    let gate_values = &values[gate_at..gate_at + 2];
    let err = finite_difference_check(
        |w| {
            let mut all = values.clone();
            all.splice(gate_at..gate_at + 2, unflatten(w, gate_values));
            fx.loss_at(all)
        },
        &flatten(gate_values),
        &flatten(&grads[gate_at..gate_at + 2]),
        H,
    );
    assert!(err < 1e-4, "gate relative error {err:e}");
}
