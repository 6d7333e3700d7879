use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Mul(Var, Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    HalfSquaredError {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`]. Nodes are appended in evaluation order so the list is
/// topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Adds `bias[f]` along axis 1 of an N×F×… input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return dim_err(format!("bias {sb:?} does not broadcast over {sx:?}"));
        }
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += b[(i / inner) % b.len()];
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias(x, bias)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geometry = ConvGeometry::from_shapes(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_forward(&geometry, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(geometry.out_shape(), out)?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(value, rg, Op::Conv2d { input, kernel, geometry }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let (shape, out, argmax) =
            kernels::maxpool2d_forward(self.value(x).shape(), self.value(x).data(), window)?;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { input: x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mul of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return dim_err(format!(
                "logits {:?} do not match {} labels",
                t.shape(),
                labels.len()
            ));
        }
        let classes = t.shape()[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        let n = labels.len().max(1) as f64;
        let loss = kernels::cross_entropy_rows(t.data(), classes, labels).iter().sum::<f64>() / n;
        let probs = kernels::softmax_rows(t.data(), classes);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `1/(2N) * sum((pred - target)^2)` over an N×1 (or length-N) prediction.
    pub fn half_squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() {
            return dim_err(format!(
                "prediction {:?} does not match {} targets",
                t.shape(),
                target.len()
            ));
        }
        let n = target.len().max(1) as f64;
        let loss = t
            .data()
            .iter()
            .zip(target)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / (2.0 * n);
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::HalfSquaredError {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to the stored
    /// gradients of differentiable leaves, so repeated calls accumulate until
    /// [`Tape::zero_grad`]. Returns the number of nodes visited.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            visited += 1;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (input, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match adjoints[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, d)| *a += d),
                    None => adjoints[input.0] = Some(contribution),
                }
            }
        }
        Ok(visited)
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut grads = Vec::new();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                    grads.push((*a, da));
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                    grads.push((*b, db));
                }
                grads
            }
            Op::AddBias(x, bias) => {
                let shape = node.value.shape();
                let channels = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![0.0; channels];
                for (i, v) in g.iter().enumerate() {
                    db[(i / inner) % channels] += v;
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (di, dk) = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    needs(input),
                    needs(kernel),
                );
                let mut grads = Vec::new();
                if let Some(di) = di {
                    grads.push((*input, di));
                }
                if let Some(dk) = dk {
                    grads.push((*kernel, dk));
                }
                grads
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
                vec![(*input, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(tb).map(|(gv, bv)| gv * bv).collect()),
                    (*b, g.iter().zip(ta).map(|(gv, av)| gv * av).collect()),
                ]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len().max(1) as f64;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(classes).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, d)]
            }
            Op::HalfSquaredError { pred, target } => {
                let scale = g[0] / target.len().max(1) as f64;
                let p = self.value(*pred).data();
                vec![(
                    *pred,
                    p.iter().zip(target).map(|(pv, y)| (pv - y) * scale).collect(),
                )]
            }
        };
        Ok(out)
    }
}
