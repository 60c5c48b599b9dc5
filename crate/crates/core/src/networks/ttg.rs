use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, Parameterized, Scalar, Tensor, Var};

use super::layers::{BatchNorm, Conv2d, ConvTranspose2d, Layer, Module, Sequential};
use super::Mode;

const LEAK: f64 = 0.2;

/// Four-convolution patch discriminator; the per-sample score is the mean
/// of the patch map.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub body: Sequential<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng>(prefix: &str, width: usize, rng: &mut R) -> Self {
        let mut body = Sequential::new();
        let widths = [1, width, 2 * width, 4 * width];
        for i in 0..3 {
            body.push(Layer::Conv(Conv2d::new(&format!("{prefix}.conv{}", i + 1), widths[i], widths[i + 1], 4, 2, 1, rng)));
            if i > 0 {
                body.push(Layer::Norm(BatchNorm::new(&format!("{prefix}.bn{}", i + 1), widths[i + 1])));
            }
            body.push(Layer::LeakyRelu(LEAK));
        }
        body.push(Layer::Conv(Conv2d::new(&format!("{prefix}.out"), widths[3], 1, 3, 1, 1, rng)));
        Self { body }
    }

    /// `[B, 1, S, S]` → scores `[B]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let map = self.body.forward(g, x, mode)?;
        g.mean_per_sample(map)
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { body: self.body.cast() }
    }
}

impl<T: Scalar> Parameterized<T> for Discriminator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.body.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.body.visit_params_mut(f);
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.body.norms()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.body.norms_mut()
    }
}

/// Image-to-image generator: two stride-2 downsamplings, two residual
/// blocks, two 2x transposed upsamplings, output squashed into `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    pub down: Sequential<T>,
    pub res: Vec<Sequential<T>>,
    pub up: Sequential<T>,
}

fn conv_bn<T: Scalar, R: Rng>(seq: &mut Sequential<T>, name: &str, c_in: usize, c_out: usize, stride: usize, relu: bool, rng: &mut R) {
    seq.push(Layer::Conv(Conv2d::new(&format!("{name}.conv"), c_in, c_out, 3, stride, 1, rng)));
    seq.push(Layer::Norm(BatchNorm::new(&format!("{name}.bn"), c_out)));
    if relu {
        seq.push(Layer::Relu);
    }
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng>(prefix: &str, width: usize, rng: &mut R) -> Self {
        let w = width;
        let mut down = Sequential::new();
        conv_bn(&mut down, &format!("{prefix}.in"), 1, w, 1, true, rng);
        conv_bn(&mut down, &format!("{prefix}.down1"), w, 2 * w, 2, true, rng);
        conv_bn(&mut down, &format!("{prefix}.down2"), 2 * w, 4 * w, 2, true, rng);
        let res = (1..=2)
            .map(|i| {
                let mut block = Sequential::new();
                conv_bn(&mut block, &format!("{prefix}.res{i}a"), 4 * w, 4 * w, 1, true, rng);
                conv_bn(&mut block, &format!("{prefix}.res{i}b"), 4 * w, 4 * w, 1, false, rng);
                block
            })
            .collect();
        let mut up = Sequential::new();
        for (i, (ci, co)) in [(4 * w, 2 * w), (2 * w, w)].into_iter().enumerate() {
            up.push(Layer::ConvT(ConvTranspose2d::new(&format!("{prefix}.up{}", i + 1), ci, co, 2, 2, 0, rng)));
            up.push(Layer::Norm(BatchNorm::new(&format!("{prefix}.upbn{}", i + 1), co)));
            up.push(Layer::Relu);
        }
        up.push(Layer::Conv(Conv2d::new(&format!("{prefix}.out"), w, 1, 3, 1, 1, rng)));
        Self { down, res, up }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, AutodiffError> {
        let mut h = self.down.forward(g, x, mode)?;
        for block in &self.res {
            let r = block.forward(g, h, mode)?;
            h = g.add(h, r)?;
        }
        let h = self.up.forward(g, h, mode)?;
        let t = g.tanh(h)?;
        let t = g.scale(t, T::lit(0.5))?;
        g.add_scalar(t, T::lit(0.5))
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            down: self.down.cast(),
            res: self.res.iter().map(|r| r.cast()).collect(),
            up: self.up.cast(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Generator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.down.visit_params(f);
        for r in &self.res {
            r.visit_params(f);
        }
        self.up.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.down.visit_params_mut(f);
        for r in &mut self.res {
            r.visit_params_mut(f);
        }
        self.up.visit_params_mut(f);
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = self.down.norms();
        for r in &self.res {
            v.extend(r.norms());
        }
        v.extend(self.up.norms());
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = self.down.norms_mut();
        for r in &mut self.res {
            v.extend(r.norms_mut());
        }
        v.extend(self.up.norms_mut());
        v
    }
}
