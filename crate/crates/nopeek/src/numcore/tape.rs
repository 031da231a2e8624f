//! Minimal reverse-mode differentiation engine over a fixed operation set.
//!
//! Values are computed eagerly as operations are recorded. Each node stores
//! vector-Jacobian closures toward its parents; `backward` replays the tape
//! in reverse insertion order, which is a valid topological order because an
//! operation can only consume already-recorded nodes. Gradient accumulation
//! order is therefore fixed, making backward bit-reproducible.
//!
//! One tape per training step, single-threaded. Recorded matrices are owned
//! clones, so leaves stay immutable once shared.

use crate::error::{Error, Result};
use crate::numcore::{kernels, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Vjp = Box<dyn Fn(&Matrix) -> Matrix>;

struct Edge {
    parent: usize,
    vjp: Vjp,
}

struct Node {
    value: Matrix,
    edges: Vec<Edge>,
}

/// Gradients keyed by tape node, produced by `backward`.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the node is unreachable from the seed.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape.0, shape.1),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, edges: Vec<Edge>) -> Var {
        debug_assert!(value.all_finite(), "tape op produced non-finite values");
        self.nodes.push(Node { value, edges });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node holding an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dim(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let value = va.add(vb);
        Ok(self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(|g: &Matrix| g.clone()) },
                Edge { parent: b.0, vjp: Box::new(|g: &Matrix| g.clone()) },
            ],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(
            value,
            vec![Edge { parent: a.0, vjp: Box::new(move |g: &Matrix| g.scale(c)) }],
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dim(format!(
                "hadamard: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (ca, cb) = (va.clone(), vb.clone());
        let value = va.hadamard(vb);
        Ok(self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(move |g: &Matrix| g.hadamard(&cb)) },
                Edge { parent: b.0, vjp: Box::new(move |g: &Matrix| g.hadamard(&ca)) },
            ],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Dim(format!(
                "matmul: {:?} x {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (ca, cb) = (va.clone(), vb.clone());
        let value = va.matmul(vb);
        Ok(self.push(
            value,
            vec![
                Edge { parent: a.0, vjp: Box::new(move |g: &Matrix| g.matmul(&cb.transpose())) },
                Edge { parent: b.0, vjp: Box::new(move |g: &Matrix| ca.transpose().matmul(g)) },
            ],
        ))
    }

    /// Matrix plus a 1 x cols row vector broadcast over rows.
    pub fn broadcast_add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (vm, vr) = (self.value(m), self.value(row));
        if vr.rows() != 1 || vr.cols() != vm.cols() {
            return Err(Error::Dim(format!(
                "broadcast_add_row: {:?} + {:?}",
                vm.shape(),
                vr.shape()
            )));
        }
        let value = Matrix::from_fn(vm.rows(), vm.cols(), |i, j| vm.at(i, j) + vr.at(0, j));
        Ok(self.push(
            value,
            vec![
                Edge { parent: m.0, vjp: Box::new(|g: &Matrix| g.clone()) },
                Edge {
                    parent: row.0,
                    vjp: Box::new(|g: &Matrix| {
                        Matrix::from_vec(1, g.cols(), g.col_sums()).expect("col sums length")
                    }),
                },
            ],
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let value = va.map(|v| v.max(0.0));
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| {
                    g.zip(&va, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                }),
            }],
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let cv = value.clone();
        self.push(
            value,
            vec![Edge { parent: a.0, vjp: Box::new(move |g: &Matrix| g.hadamard(&cv)) }],
        )
    }

    /// Natural log; entries must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log requires strictly positive entries".into()));
        }
        let cv = va.clone();
        let value = va.map(f64::ln);
        Ok(self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| g.zip(&cv, |gv, xv| gv / xv)),
            }],
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape();
        let value = Matrix::scalar(self.value(a).sum());
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| Matrix::filled(shape.0, shape.1, g.scalar_value())),
            }],
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape();
        let count = (shape.0 * shape.1) as f64;
        let value = Matrix::scalar(self.value(a).mean());
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| {
                    Matrix::filled(shape.0, shape.1, g.scalar_value() / count)
                }),
            }],
        )
    }

    /// Elementwise sqrt(max(x, floor)). Clamped entries get zero gradient.
    pub fn sqrt_clamp(&mut self, a: Var, floor: f64) -> Var {
        let va = self.value(a).clone();
        let value = va.map(|v| v.max(floor).sqrt());
        let cv = value.clone();
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| {
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                        if va.at(i, j) > floor {
                            g.at(i, j) * 0.5 / cv.at(i, j)
                        } else {
                            0.0
                        }
                    })
                }),
            }],
        )
    }

    /// Sum of squared entries, a 1x1 node.
    pub fn l2_sq(&mut self, a: Var) -> Var {
        let va = self.value(a).clone();
        let value = Matrix::scalar(va.data().iter().map(|v| v * v).sum());
        self.push(
            value,
            vec![Edge {
                parent: a.0,
                vjp: Box::new(move |g: &Matrix| va.scale(2.0 * g.scalar_value())),
            }],
        )
    }

    /// Pairwise Euclidean row distances with the squared-distance clamp at
    /// `eps`. Clamped pairs (always including the diagonal) pass no gradient.
    pub fn pairwise_dist(&mut self, x: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() < 2 {
            return Err(Error::SampleSize(format!(
                "pairwise_dist needs at least 2 rows, got {}",
                vx.rows()
            )));
        }
        let cx = vx.clone();
        let dist = kernels::pairwise_dist(vx, eps);
        let mask = kernels::pairwise_clamp_mask(vx, eps);
        let cd = dist.clone();
        Ok(self.push(
            dist,
            vec![Edge {
                parent: x.0,
                vjp: Box::new(move |g: &Matrix| {
                    let n = cd.rows();
                    // w_ij = (g_ij + g_ji) * mask_ij / d_ij
                    let w = Matrix::from_fn(n, n, |i, j| {
                        let m = mask.at(i, j);
                        if m == 0.0 {
                            0.0
                        } else {
                            (g.at(i, j) + g.at(j, i)) / cd.at(i, j)
                        }
                    });
                    // dX = (diag(w 1) - w) X
                    let rs = w.row_sums();
                    let mut lap = w.scale(-1.0);
                    for i in 0..n {
                        lap.set(i, i, lap.at(i, i) + rs[i]);
                    }
                    lap.matmul(&cx)
                }),
            }],
        ))
    }

    /// Double centering; the adjoint of this linear map is itself.
    pub fn double_center(&mut self, d: Var) -> Result<Var> {
        let vd = self.value(d);
        if vd.rows() != vd.cols() {
            return Err(Error::Dim(format!(
                "double_center needs a square matrix, got {:?}",
                vd.shape()
            )));
        }
        let value = kernels::double_center(vd);
        Ok(self.push(
            value,
            vec![Edge { parent: d.0, vjp: Box::new(|g: &Matrix| kernels::double_center(g)) }],
        ))
    }

    /// Mean softmax cross-entropy against constant one-hot targets; 1x1 node.
    pub fn softmax_cce(&mut self, logits: Var, y: &Matrix) -> Result<Var> {
        let vl = self.value(logits);
        if vl.shape() != y.shape() {
            return Err(Error::Dim(format!(
                "softmax_cce: logits {:?} vs targets {:?}",
                vl.shape(),
                y.shape()
            )));
        }
        let (loss, probs) = kernels::softmax_cce(vl, y);
        let n = vl.rows() as f64;
        let resid = probs.sub(y);
        Ok(self.push(
            Matrix::scalar(loss),
            vec![Edge {
                parent: logits.0,
                vjp: Box::new(move |g: &Matrix| resid.scale(g.scalar_value() / n)),
            }],
        ))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss node, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(vec![(loss, Matrix::scalar(1.0))])
    }

    /// Reverse pass with explicit seed gradients. Seeds at interior nodes
    /// accumulate with contributions flowing from above, which is how an
    /// externally supplied gradient (for example one received over a wire)
    /// joins a locally recorded graph.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Matrix)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            if seed.shape() != self.value(v).shape() {
                return Err(Error::Dim(format!(
                    "seed gradient {:?} does not match node {:?}",
                    seed.shape(),
                    self.value(v).shape()
                )));
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&seed),
                slot => *slot = Some(seed),
            }
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            for edge in &self.nodes[id].edges {
                let contribution = (edge.vjp)(&g);
                debug_assert_eq!(contribution.shape(), self.nodes[edge.parent].value.shape());
                match &mut grads[edge.parent] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
