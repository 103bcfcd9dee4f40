//! Mini-batch style graph: adjacency from flattened style features, its
//! symmetric degree normalization, and stacked first-order graph layers that
//! smooth per-instance mean vectors across the batch.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Matrix, Tensor4};

pub const DEFAULT_EPS_DEGREE: f64 = 1e-8;
pub const DEFAULT_NUM_LAYERS: usize = 2;
pub const DEFAULT_THETA_NOISE: f64 = 1e-2;

/// Whether the graph layers take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Infer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

/// How node similarities are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjacencyVariant {
    /// Raw Gram matrix of the flattened features.
    #[default]
    Gram,
    /// Gram matrix of unit-normalized rows.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

/// Parameterization of each layer weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThetaForm {
    /// Full `C x C` matrix.
    #[default]
    Full,
    /// One scale per channel, stored as a `1 x C` row and applied as `diag(row)`.
    Diagonal,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($s:literal => $v:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

str_enum!(Mode, "mode", { "train" => Mode::Train, "infer" => Mode::Infer });
str_enum!(AdjacencyVariant, "adjacency variant", { "gram" => AdjacencyVariant::Gram, "cosine" => AdjacencyVariant::Cosine });
str_enum!(Activation, "activation", { "none" => Activation::None, "relu" => Activation::Relu });
str_enum!(ThetaForm, "theta form", { "full" => ThetaForm::Full, "diagonal" => ThetaForm::Diagonal });

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AdjacencyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyVariant::Gram => "gram",
            AdjacencyVariant::Cosine => "cosine",
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        })
    }
}

impl fmt::Display for ThetaForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThetaForm::Full => "full",
            ThetaForm::Diagonal => "diagonal",
        })
    }
}

/// Similarity matrix over the batch with its degree normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub a_tilde: Matrix,
    /// Row sums of `a_tilde`, clamped below at `eps_degree`.
    pub degree: Vec<f64>,
    /// `D^{-1/2} A D^{-1/2}`.
    pub propagation: Matrix,
}

impl AdjacencyMatrix {
    pub fn nodes(&self) -> usize {
        self.degree.len()
    }

    /// Normalizes an arbitrary nonnegative symmetric similarity matrix.
    pub fn from_similarity(a_tilde: Matrix, eps_degree: f64) -> Result<Self> {
        let n = a_tilde.rows();
        if a_tilde.cols() != n {
            return Err(Error::shape(
                "from_similarity",
                format!("{}x{} is not square", n, a_tilde.cols()),
            ));
        }
        let degree: Vec<f64> = (0..n)
            .map(|i| a_tilde.row(i).iter().sum::<f64>().max(eps_degree))
            .collect();
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut propagation = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let p = a_tilde.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
                propagation.set(i, j, p);
                propagation.set(j, i, p);
            }
        }
        Ok(AdjacencyMatrix {
            a_tilde,
            degree,
            propagation,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the batch similarity graph from encoder-space style features.
///
/// The Gram product is used as-is: its diagonal already carries each node's
/// self-similarity, so no extra identity is added.
pub fn build_adjacency(y: &Tensor4, variant: AdjacencyVariant, eps_degree: f64) -> AdjacencyMatrix {
    let mut rows = y.flatten_batch();
    if variant == AdjacencyVariant::Cosine {
        for i in 0..rows.rows() {
            let r = rows.row_mut(i);
            let norm = dot(r, r).sqrt();
            if norm > 0.0 {
                r.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    let n = rows.rows();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let g = dot(rows.row(i), rows.row(j));
            gram.set(i, j, g);
            gram.set(j, i, g);
        }
    }
    AdjacencyMatrix::from_similarity(gram, eps_degree).expect("gram matrix is square")
}

/// One first-order graph layer: `P · nodes · theta`.
pub fn gcn_layer(nodes: &Matrix, adj: &AdjacencyMatrix, theta: &Matrix) -> Result<Matrix> {
    if nodes.rows() != adj.nodes() {
        return Err(Error::shape(
            "gcn_layer",
            format!("{} node rows for a {}-node graph", nodes.rows(), adj.nodes()),
        ));
    }
    if theta.rows() != nodes.cols() || theta.cols() != nodes.cols() {
        return Err(Error::shape(
            "gcn_layer",
            format!("theta {}x{} for {} features", theta.rows(), theta.cols(), nodes.cols()),
        ));
    }
    adj.propagation.matmul(nodes)?.matmul(theta)
}

/// Learnable graph layers applied to the style mean vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStack {
    /// `C x C` (full) or `1 x C` (diagonal) per layer.
    pub layers: Vec<Matrix>,
    pub activation: Activation,
    pub mode: Mode,
    pub form: ThetaForm,
}

impl GraphStack {
    /// Every layer weight set to the identity.
    pub fn identity(channels: usize, num_layers: usize, form: ThetaForm) -> Self {
        let layer = match form {
            ThetaForm::Full => Matrix::identity(channels),
            ThetaForm::Diagonal => Matrix::filled(1, channels, 1.0),
        };
        GraphStack {
            layers: vec![layer; num_layers],
            activation: Activation::None,
            mode: Mode::Train,
            form,
        }
    }

    /// Identity plus i.i.d. `N(0, noise^2)` perturbations.
    pub fn init(channels: usize, num_layers: usize, form: ThetaForm, noise: f64, rng: &mut Rng) -> Self {
        let mut stack = Self::identity(channels, num_layers, form);
        for layer in &mut stack.layers {
            layer.data_mut().iter_mut().for_each(|v| *v += noise * rng.normal());
        }
        stack
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, Matrix::cols)
    }

    /// Layer `i` as a square `C x C` matrix.
    pub fn theta(&self, i: usize) -> Matrix {
        match self.form {
            ThetaForm::Full => self.layers[i].clone(),
            ThetaForm::Diagonal => Matrix::from_diag(self.layers[i].data()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (i, layer) in self.layers.iter().enumerate() {
            let expected_rows = match self.form {
                ThetaForm::Full => c,
                ThetaForm::Diagonal => 1,
            };
            if layer.rows() != expected_rows || layer.cols() != c {
                return Err(Error::shape(
                    "GraphStack",
                    format!("layer {i} is {}x{}, expected {expected_rows}x{c}", layer.rows(), layer.cols()),
                ));
            }
            if !layer.is_finite() {
                return Err(Error::shape("GraphStack", format!("layer {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn param_name(i: usize) -> String {
        format!("graph.{i}.theta")
    }
}

/// Runs the mean vectors through every graph layer, with the configured
/// activation between consecutive layers.
pub fn smooth_means(mu_y: &Matrix, adj: &AdjacencyMatrix, stack: &GraphStack) -> Result<Matrix> {
    if stack.mode != Mode::Train {
        return Err(Error::Mode {
            op: "smooth_means",
            mode: stack.mode.as_str(),
        });
    }
    let mut h = mu_y.clone();
    for i in 0..stack.num_layers() {
        if i > 0 && stack.activation == Activation::Relu {
            h = h.map(|v| v.max(0.0));
        }
        h = gcn_layer(&h, adj, &stack.theta(i))?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape4;
    use proptest::prelude::*;

    fn random_positive_features(seed: u64, n: usize) -> Tensor4 {
        Tensor4::rand_uniform(Shape4::new(n, 2, 3, 3), 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let y = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![2.0, 0.0]).unwrap();
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        assert_eq!(adj.a_tilde.data(), &[4.0]);
        assert_eq!(adj.degree, vec![4.0]);
        assert_eq!(adj.propagation.data(), &[1.0]);
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let y = Tensor4::from_vec(Shape4::new(2, 1, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        assert_eq!(adj.a_tilde, Matrix::identity(2));
        assert_eq!(adj.propagation, Matrix::identity(2));
    }

    #[test]
    fn gram_matches_dot_product_loop() {
        let mut rng = Rng::new(31);
        let s = Shape4::new(4, 2, 3, 3);
        let y = Tensor4::randn(s, 1.0, &mut rng);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..s.c {
                    for h in 0..s.h {
                        for w in 0..s.w {
                            acc += y.get(i, c, h, w) * y.get(j, c, h, w);
                        }
                    }
                }
                assert!((adj.a_tilde.get(i, j) - acc).abs() < 1e-10);
            }
        }
        assert_eq!(adj.a_tilde.max_asymmetry(), 0.0);
        assert_eq!(adj.propagation.max_asymmetry(), 0.0);
    }

    #[test]
    fn cosine_variant_has_unit_diagonal() {
        let y = random_positive_features(3, 5);
        let adj = build_adjacency(&y, AdjacencyVariant::Cosine, DEFAULT_EPS_DEGREE);
        for i in 0..5 {
            assert!((adj.a_tilde.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_are_clamped() {
        let y = Tensor4::zeros(Shape4::new(3, 2, 2, 2));
        for variant in [AdjacencyVariant::Gram, AdjacencyVariant::Cosine] {
            let adj = build_adjacency(&y, variant, DEFAULT_EPS_DEGREE);
            assert!(adj.degree.iter().all(|&d| d == DEFAULT_EPS_DEGREE));
            assert!(adj.propagation.is_finite());
        }
    }

    #[test]
    fn gcn_single_node_identity() {
        let y = Tensor4::filled(Shape4::new(1, 3, 2, 2), 0.7);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let nodes = Matrix::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap();
        let out = gcn_layer(&nodes, &adj, &Matrix::identity(3)).unwrap();
        assert!(out.max_abs_diff(&nodes) < 1e-15);
    }

    #[test]
    fn gcn_identical_nodes_fixed_point() {
        let one = Tensor4::rand_uniform(Shape4::new(1, 2, 3, 3), 0.0, 1.0, &mut Rng::new(4));
        let y = Tensor4::stack(&[one.clone(), one.clone(), one.clone(), one]).unwrap();
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        for i in 0..4 {
            let s: f64 = adj.propagation.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let row = vec![0.3, -1.2];
        let nodes = Matrix::from_rows(&vec![row.clone(); 4]).unwrap();
        let out = gcn_layer(&nodes, &adj, &Matrix::identity(2)).unwrap();
        for i in 0..4 {
            for (a, b) in out.row(i).iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_matches_explicit_matmul() {
        let mut rng = Rng::new(77);
        let n = 5;
        let c = 4;
        // Random symmetric positive similarity.
        let b = Matrix::randn(n, 3, 1.0, &mut rng).map(f64::abs);
        let a = b.matmul(&b.transpose()).unwrap();
        let adj = AdjacencyMatrix::from_similarity(a.clone(), DEFAULT_EPS_DEGREE).unwrap();
        let nodes = Matrix::randn(n, c, 1.0, &mut rng);
        let theta = Matrix::randn(c, c, 1.0, &mut rng);
        let out = gcn_layer(&nodes, &adj, &theta).unwrap();

        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let di: f64 = (0..n).map(|k| a.get(i, k)).sum();
            for j in 0..n {
                let dj: f64 = (0..n).map(|k| a.get(j, k)).sum();
                p.set(i, j, a.get(i, j) / (di * dj).sqrt());
            }
        }
        let mut expected = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0;
                for k in 0..n {
                    for l in 0..c {
                        acc += p.get(i, k) * nodes.get(k, l) * theta.get(l, j);
                    }
                }
                expected.set(i, j, acc);
            }
        }
        assert!(out.max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn gcn_shape_errors() {
        let adj = build_adjacency(&random_positive_features(1, 3), AdjacencyVariant::Gram, 1e-8);
        assert!(gcn_layer(&Matrix::zeros(2, 4), &adj, &Matrix::identity(4)).is_err());
        assert!(gcn_layer(&Matrix::zeros(3, 4), &adj, &Matrix::identity(3)).is_err());
    }

    #[test]
    fn smooth_single_node_is_identity() {
        let y = random_positive_features(2, 1);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let mu = Matrix::from_rows(&[vec![0.25, -3.0]]).unwrap();
        let stack = GraphStack::identity(2, 2, ThetaForm::Full);
        let out = smooth_means(&mu, &adj, &stack).unwrap();
        assert!(out.max_abs_diff(&mu) < 1e-15);
    }

    #[test]
    fn smooth_identical_batch_is_fixed_point() {
        let one = random_positive_features(9, 1);
        let y = Tensor4::stack(&[one.clone(), one.clone(), one]).unwrap();
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let mu = Matrix::from_rows(&vec![vec![1.5, 2.5]; 3]).unwrap();
        let out = smooth_means(&mu, &adj, &GraphStack::identity(2, 2, ThetaForm::Full)).unwrap();
        assert!(out.max_abs_diff(&mu) < 1e-12);
    }

    #[test]
    fn smooth_matches_sequential_composition() {
        let mut rng = Rng::new(12);
        let y = random_positive_features(12, 4);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let mu = Matrix::randn(4, 2, 1.0, &mut rng);
        let stack = GraphStack::init(2, 2, ThetaForm::Full, 0.3, &mut rng);
        let out = smooth_means(&mu, &adj, &stack).unwrap();
        let first = gcn_layer(&mu, &adj, &stack.layers[0]).unwrap();
        let second = gcn_layer(&first, &adj, &stack.layers[1]).unwrap();
        assert!(out.max_abs_diff(&second) < 1e-12);
    }

    #[test]
    fn smooth_rejects_infer_mode() {
        let y = random_positive_features(2, 2);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let stack = GraphStack::identity(2, 2, ThetaForm::Full).with_mode(Mode::Infer);
        let err = smooth_means(&Matrix::zeros(2, 2), &adj, &stack).unwrap_err();
        assert!(matches!(err, Error::Mode { .. }));
    }

    #[test]
    fn relu_between_layers_only() {
        let y = random_positive_features(5, 1);
        let adj = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
        let mu = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        // One layer: no activation is ever applied.
        let one = GraphStack::identity(2, 1, ThetaForm::Full).with_activation(Activation::Relu);
        assert_eq!(smooth_means(&mu, &adj, &one).unwrap().data(), &[-1.0, 2.0]);
        let two = GraphStack::identity(2, 2, ThetaForm::Full).with_activation(Activation::Relu);
        assert_eq!(smooth_means(&mu, &adj, &two).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn diagonal_form_matches_explicit_diag() {
        let mut rng = Rng::new(44);
        let y = random_positive_features(44, 3);
        let adj = build_adjacency(&y, AdjacencyVariant::Cosine, DEFAULT_EPS_DEGREE);
        let mu = Matrix::randn(3, 2, 1.0, &mut rng);
        let stack = GraphStack::init(2, 2, ThetaForm::Diagonal, 0.5, &mut rng);
        stack.validate().unwrap();
        let out = smooth_means(&mu, &adj, &stack).unwrap();
        let mut full = stack.clone();
        full.form = ThetaForm::Full;
        full.layers = (0..2).map(|i| stack.theta(i)).collect();
        assert_eq!(out, smooth_means(&mu, &adj, &full).unwrap());
    }

    proptest! {
        #[test]
        fn propagation_scale_invariant(seed in any::<u64>(), scale in prop::sample::select(vec![0.1, 7.3, 1000.0])) {
            let y = random_positive_features(seed, 4);
            let a = build_adjacency(&y, AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
            let b = build_adjacency(&y.scale(scale), AdjacencyVariant::Gram, DEFAULT_EPS_DEGREE);
            prop_assert!(a.propagation.max_abs_diff(&b.propagation) < 1e-9);
        }

        #[test]
        fn smooth_is_permutation_equivariant(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let n = 5;
            let y = Tensor4::rand_uniform(Shape4::new(n, 3, 2, 2), 0.0, 1.0, &mut rng);
            let mu = Matrix::randn(n, 3, 1.0, &mut rng);
            let stack = GraphStack::init(3, 2, ThetaForm::Full, 0.1, &mut rng);
            let perm = rng.permutation(n);
            let base = smooth_means(&mu, &build_adjacency(&y, AdjacencyVariant::Gram, 1e-8), &stack).unwrap();
            let permuted = smooth_means(
                &mu.permute_rows(&perm),
                &build_adjacency(&y.permute_batch(&perm), AdjacencyVariant::Gram, 1e-8),
                &stack,
            ).unwrap();
            prop_assert!(permuted.max_abs_diff(&base.permute_rows(&perm)) < 1e-12);
        }

        #[test]
        fn smooth_is_linear_with_identity_weights(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let y = Tensor4::rand_uniform(Shape4::new(4, 2, 2, 2), 0.0, 1.0, &mut rng);
            let adj = build_adjacency(&y, AdjacencyVariant::Gram, 1e-8);
            let stack = GraphStack::identity(2, 2, ThetaForm::Full);
            let m1 = Matrix::randn(4, 2, 1.0, &mut rng);
            let m2 = Matrix::randn(4, 2, 1.0, &mut rng);
            let combo = m1.scale(a).add(&m2.scale(b)).unwrap();
            let lhs = smooth_means(&combo, &adj, &stack).unwrap();
            let rhs = smooth_means(&m1, &adj, &stack).unwrap().scale(a)
                .add(&smooth_means(&m2, &adj, &stack).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }
}
