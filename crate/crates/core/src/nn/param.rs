//! Trainable parameters and traversal over named parameters.

use rand::Rng;

#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Excluded from weight decay (biases and normalization gains).
    pub no_decay: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            no_decay: false,
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let mut p = Param::zeros(shape);
        if bound > 0.0 {
            p.value
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn without_decay(mut self) -> Self {
        self.no_decay = true;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Walks parameters of a module tree, handing out dotted names.
pub struct ParamVisitor<'a> {
    prefix: Vec<String>,
    f: &'a mut dyn FnMut(&str, &mut Param),
}

impl<'a> ParamVisitor<'a> {
    pub fn new(f: &'a mut dyn FnMut(&str, &mut Param)) -> Self {
        ParamVisitor {
            prefix: Vec::new(),
            f,
        }
    }

    pub fn param(&mut self, name: &str, p: &mut Param) {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        };
        (self.f)(&full, p);
    }

    pub fn scope(&mut self, name: impl ToString, g: impl FnOnce(&mut Self)) {
        self.prefix.push(name.to_string());
        g(self);
        self.prefix.pop();
    }
}

pub trait Module {
    fn visit(&mut self, v: &mut ParamVisitor);

    fn zero_grad(&mut self) {
        self.visit(&mut ParamVisitor::new(&mut |_, p| p.grad.fill(0.0)));
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut ParamVisitor::new(&mut |_, p| n += p.len()));
        n
    }

    /// Named copies of all parameter values in visiting order.
    fn named_values(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut ParamVisitor::new(&mut |name, p| {
            out.push((name.to_string(), p.shape.clone(), p.value.clone()))
        }));
        out
    }
}
