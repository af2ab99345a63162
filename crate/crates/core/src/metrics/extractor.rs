use crate::error::{bail, Result};
use crate::nn::{join, Conv2d, Linear, Module};
use crate::optim::AdamW;
use crate::tensor::{no_grad, Conv2dOptions, Rng, Tensor};

/// Deterministic map from normalised images [N, C, H, W] to features and class probabilities.
pub trait FeatureExtractor: Send + Sync {
    fn feature_dim(&self) -> usize;
    /// [N, feature_dim]
    fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
    /// [N, classes], rows summing to one.
    fn class_probs(&self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

const FEATURES: usize = 64;

/// Two conv stages, global pooling and a two-layer head. The hidden layer of
/// the head serves as the feature vector.
#[derive(Clone, Debug)]
pub struct TinyClassifier {
    conv1: Conv2d<f32>,
    conv2: Conv2d<f32>,
    fc1: Linear<f32>,
    fc2: Linear<f32>,
    in_ch: usize,
    classes: usize,
}

fn pool_if_even(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x.dim(2).is_multiple_of(2) && x.dim(3).is_multiple_of(2) {
        x.avg_pool2x2()
    } else {
        Ok(x.clone())
    }
}

impl TinyClassifier {
    pub fn new(in_ch: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            bail!(Config, "a classifier needs at least two classes, got {classes}");
        }
        let mut rng = Rng::new(seed);
        let same = Conv2dOptions::same3x3();
        Ok(Self {
            conv1: Conv2d::new(in_ch, 16, 3, same, &mut rng),
            conv2: Conv2d::new(16, 32, 3, same, &mut rng),
            fc1: Linear::new(32, FEATURES, &mut rng),
            fc2: Linear::new(FEATURES, classes, &mut rng),
            in_ch,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn hidden(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.rank() != 4 || x.dim(1) != self.in_ch {
            bail!(Dimension, "classifier expects [N, {}, H, W], got {:?}", self.in_ch, x.shape());
        }
        let h = pool_if_even(&self.conv1.forward(x)?.silu())?;
        let h = pool_if_even(&self.conv2.forward(&h)?.silu())?;
        Ok(self.fc1.forward(&h.global_avg_pool()?)?.silu())
    }

    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.fc2.forward(&self.hidden(x)?)
    }

    /// Mini-batch AdamW on cross-entropy. Returns the final training accuracy.
    pub fn fit(&mut self, images: &Tensor<f32>, labels: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<f64> {
        let n = labels.len();
        if images.rank() != 4 || images.dim(0) != n || n == 0 {
            bail!(Dimension, "{n} labels for images of shape {:?}", images.shape());
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.classes) {
            bail!(Input, "label {bad} out of range for {} classes", self.classes);
        }
        let per = images.numel() / n;
        let bs = n.min(32);
        let mut opt = AdamW::new(lr, 0.0);
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(bs) {
                let mut data = Vec::with_capacity(chunk.len() * per);
                for &i in chunk {
                    data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
                }
                let mut shape = images.shape().to_vec();
                shape[0] = chunk.len();
                let x = Tensor::from_vec(data, &shape)?;
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                self.zero_grad();
                self.logits(&x)?.cross_entropy(&y)?.backward()?;
                opt.step(self)?;
            }
        }
        let probs = self.class_probs(images)?;
        let correct = probs
            .data()
            .chunks(self.classes)
            .zip(labels)
            .filter(|(row, &l)| row.iter().enumerate().all(|(j, &p)| j == l || p <= row[l]))
            .count();
        Ok(correct as f64 / n as f64)
    }
}

impl FeatureExtractor for TinyClassifier {
    fn feature_dim(&self) -> usize {
        FEATURES
    }

    fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        no_grad(|| self.hidden(images))
    }

    fn class_probs(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        no_grad(|| self.logits(images)?.softmax())
    }
}

impl Module<f32> for TinyClassifier {
    fn visit_params(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<f32>)) {
        self.conv1.visit_params(&join(p, "conv1"), f);
        self.conv2.visit_params(&join(p, "conv2"), f);
        self.fc1.visit_params(&join(p, "fc1"), f);
        self.fc2.visit_params(&join(p, "fc2"), f);
    }

    fn visit_params_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<f32>)) {
        self.conv1.visit_params_mut(&join(p, "conv1"), f);
        self.conv2.visit_params_mut(&join(p, "conv2"), f);
        self.fc1.visit_params_mut(&join(p, "fc1"), f);
        self.fc2.visit_params_mut(&join(p, "fc2"), f);
    }
}

/// The classifier architecture left at a fixed-seed random initialisation.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor(TinyClassifier);

impl RandomConvExtractor {
    pub fn new(in_ch: usize, seed: u64) -> Self {
        Self(TinyClassifier::new(in_ch, 10, seed).expect("10 classes is valid"))
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn feature_dim(&self) -> usize {
        FEATURES
    }

    fn features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.features(images)
    }

    fn class_probs(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.0.class_probs(images)
    }
}
