//! Reflective light field: heads A, B and D, the ASG directional encoder,
//! and the ambient composition of the final point color.

mod asg;
mod mlp;
mod sh;

pub use asg::{asg_encode, AsgBank, AsgLobes, BANDWIDTH_FLOOR};
pub use mlp::{Linear, Mlp};
pub use sh::{sh_basis, sh_coeff_count, sh_encode, MAX_SH_DEGREE};

use rand::Rng;

use crate::real::{sigmoid, Real};

/// How the view-dependent part of the color is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appearance {
    /// ASG encoding decoded by head D.
    Asg,
    /// Head B emits spherical-harmonic coefficients for the specular color.
    Sh,
    /// No specular term: color is `c_d` modulated by the ambient light.
    Lambertian,
}

impl Appearance {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "asg" => Some(Self::Asg),
            "sh" => Some(Self::Sh),
            "lambertian" => Some(Self::Lambertian),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Asg => "asg",
            Self::Sh => "sh",
            Self::Lambertian => "lambertian",
        }
    }
}

/// Sizes of the light-field heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LightFieldShape {
    pub appearance: Appearance,
    pub feature_dim: usize,
    pub head_a_depth: usize,
    pub head_a_width: usize,
    pub head_b_width: usize,
    pub head_d_width: usize,
    pub lobes: usize,
    pub asg_dim: usize,
    pub sh_degree: usize,
}

/// Outputs of head A: `c_d`, `lambda_s` and `n_raw` in that column order.
pub const HEAD_A_OUT: usize = 7;

/// Normal used when the raw normal is too short to normalize.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];
pub const NORMAL_EPS: f64 = 1e-8;

impl LightFieldShape {
    pub fn head_a_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.feature_dim];
        s.extend(std::iter::repeat(self.head_a_width).take(self.head_a_depth.saturating_sub(1)));
        s.push(HEAD_A_OUT);
        s
    }

    /// Input width of head B: the last hidden layer of head A.
    pub fn head_a_hidden(&self) -> usize {
        if self.head_a_depth > 1 {
            self.head_a_width
        } else {
            self.feature_dim
        }
    }

    pub fn head_b_out(&self) -> usize {
        match self.appearance {
            Appearance::Asg => self.lobes * (self.asg_dim + 2),
            Appearance::Sh => 3 * sh_coeff_count(self.sh_degree),
            Appearance::Lambertian => 0,
        }
    }

    pub fn head_b_sizes(&self) -> Vec<usize> {
        vec![self.head_a_hidden(), self.head_b_width, self.head_b_out()]
    }

    pub fn head_d_sizes(&self) -> Vec<usize> {
        vec![self.asg_dim + 1, self.head_d_width, 3]
    }
}

/// Per-point state of the reflective light field.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceResponse<T> {
    pub c_d: [T; 3],
    pub lambda_s: T,
    pub normal: [T; 3],
    pub normal_fallback: bool,
    pub c_s: [T; 3],
    pub c_ref: [T; 3],
}

/// Output of head A for one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAOutput<T> {
    pub c_d: [T; 3],
    pub lambda_s: T,
    pub normal: [T; 3],
    pub normal_fallback: bool,
    pub hidden: Vec<T>,
}

/// The multi-head MLP plus the fixed ASG lobes.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField<T> {
    pub shape: LightFieldShape,
    pub head_a: Mlp<T>,
    /// Absent for the Lambertian variant.
    pub head_b: Option<Mlp<T>>,
    /// Present only for the ASG variant.
    pub head_d: Option<Mlp<T>>,
    pub lobes: AsgLobes,
}

/// Normalizes a raw normal, falling back to +Z for near-zero input.
pub fn normalize_normal<T: Real>(raw: &[T; 3]) -> ([T; 3], bool) {
    let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
    if len < T::c(NORMAL_EPS) {
        (FALLBACK_NORMAL.map(T::c), true)
    } else {
        (raw.map(|v| v / len), false)
    }
}

impl<T: Real> LightField<T> {
    pub fn random<R: Rng + ?Sized>(shape: LightFieldShape, rng: &mut R) -> Self {
        let head_a = Mlp::random(&shape.head_a_sizes(), rng);
        let head_b = (shape.appearance != Appearance::Lambertian)
            .then(|| Mlp::random(&shape.head_b_sizes(), rng));
        let head_d =
            (shape.appearance == Appearance::Asg).then(|| Mlp::random(&shape.head_d_sizes(), rng));
        let lobes = AsgLobes::fibonacci(shape.lobes);
        Self {
            shape,
            head_a,
            head_b,
            head_d,
            lobes,
        }
    }

    pub fn zeros(shape: LightFieldShape) -> Self {
        let head_a = Mlp::zeros(&shape.head_a_sizes());
        let head_b =
            (shape.appearance != Appearance::Lambertian).then(|| Mlp::zeros(&shape.head_b_sizes()));
        let head_d =
            (shape.appearance == Appearance::Asg).then(|| Mlp::zeros(&shape.head_d_sizes()));
        let lobes = AsgLobes::fibonacci(shape.lobes);
        Self {
            shape,
            head_a,
            head_b,
            head_d,
            lobes,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn param_count(&self) -> usize {
        self.head_a.param_count()
            + self.head_b.as_ref().map_or(0, Mlp::param_count)
            + self.head_d.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn head_a(&self, feature: &[T]) -> HeadAOutput<T> {
        let (out, hidden) = self.head_a.forward_one(feature);
        let (normal, normal_fallback) = normalize_normal(&[out[4], out[5], out[6]]);
        HeadAOutput {
            c_d: [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])],
            lambda_s: sigmoid(out[3]),
            normal,
            normal_fallback,
            hidden,
        }
    }

    /// Raw head B output for a head A hidden vector.
    pub fn head_b_raw(&self, hidden: &[T]) -> Vec<T> {
        match &self.head_b {
            Some(b) => b.forward_one(hidden).0,
            None => Vec::new(),
        }
    }

    /// Per-point ASG bank decoded from head B.
    pub fn head_b(&self, hidden: &[T]) -> AsgBank<T> {
        AsgBank::from_raw(&self.head_b_raw(hidden), self.shape.lobes, self.shape.asg_dim)
    }

    pub fn head_d(&self, fs: &[T], cos_nd: T) -> [T; 3] {
        let head = self.head_d.as_ref().expect("head D exists for the ASG variant");
        let mut x = fs.to_vec();
        x.push(cos_nd);
        let (out, _) = head.forward_one(&x);
        [sigmoid(out[0]), sigmoid(out[1]), sigmoid(out[2])]
    }

    /// Full reflective response at one point seen along unit direction `dir`
    /// (pointing from the camera into the scene).
    pub fn respond(&self, feature: &[T], dir: &[T; 3]) -> SurfaceResponse<T> {
        let a = self.head_a(feature);
        let omega_o = dir.map(|v| -v);
        let (c_s, lambda_s) = match self.shape.appearance {
            Appearance::Asg => {
                let bank = self.head_b(&a.hidden);
                let fs = asg_encode(&omega_o, &self.lobes, &bank);
                let cos_nd = a.normal[0] * dir[0] + a.normal[1] * dir[1] + a.normal[2] * dir[2];
                (self.head_d(&fs, cos_nd), a.lambda_s)
            }
            Appearance::Sh => {
                let coeffs = self.head_b_raw(&a.hidden);
                (sh_encode(&omega_o, self.shape.sh_degree, &coeffs), a.lambda_s)
            }
            Appearance::Lambertian => ([T::zero(); 3], T::zero()),
        };
        SurfaceResponse {
            c_d: a.c_d,
            lambda_s,
            normal: a.normal,
            normal_fallback: a.normal_fallback,
            c_s,
            c_ref: compose_reflected(&a.c_d, lambda_s, &c_s),
        }
    }
}

/// `c_ref = c_d + lambda_s c_s`, unclamped.
pub fn compose_reflected<T: Real>(c_d: &[T; 3], lambda_s: T, c_s: &[T; 3]) -> [T; 3] {
    [0, 1, 2].map(|k| c_d[k] + lambda_s * c_s[k])
}

/// `l = lambda_amb + (1 - lambda_amb) c_amb` per channel.
pub fn ambient_compose<T: Real>(lambda_amb: T, c_amb: &[T; 3]) -> [T; 3] {
    c_amb.map(|c| lambda_amb + (T::one() - lambda_amb) * c)
}

pub fn point_color<T: Real>(c_ref: &[T; 3], l: &[T; 3]) -> [T; 3] {
    [0, 1, 2].map(|k| c_ref[k] * l[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_shape(appearance: Appearance) -> LightFieldShape {
        LightFieldShape {
            appearance,
            feature_dim: 6,
            head_a_depth: 3,
            head_a_width: 8,
            head_b_width: 8,
            head_d_width: 8,
            lobes: 4,
            asg_dim: 3,
            sh_degree: 2,
        }
    }

    #[test]
    fn zero_heads() {
        let lf = LightField::<f64>::zeros(small_shape(Appearance::Asg));
        let a = lf.head_a(&[0.3; 6]);
        assert_eq!(a.c_d, [0.5; 3]);
        assert_eq!(a.lambda_s, 0.5);
        assert!(a.normal_fallback);
        assert_eq!(a.normal, [0.0, 0.0, 1.0]);
        assert_eq!(lf.head_d(&[1.0, 2.0, 3.0], 0.4), [0.5; 3]);
    }

    #[test]
    fn normal_normalization() {
        assert_eq!(normalize_normal(&[0.0, 0.0, 2.0]), ([0.0, 0.0, 1.0], false));
        assert!(normalize_normal(&[1e-9, 0.0, 0.0]).1);
    }

    #[test]
    fn head_b_output_dim_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = small_shape(Appearance::Asg);
        assert_eq!(shape.head_b_out(), 4 * (3 + 2));
        let lf = LightField::<f64>::random(shape, &mut rng);
        use rand::Rng;
        for _ in 0..10_000 {
            let h: Vec<f64> = (0..8).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let bank = lf.head_b(&h);
            assert!(bank.lambda.iter().chain(&bank.mu).all(|v| *v > 0.0));
        }
    }

    #[test]
    fn head_d_range() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lf = LightField::<f64>::random(small_shape(Appearance::Asg), &mut rng);
        for _ in 0..10_000 {
            let fs: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = lf.head_d(&fs, rng.gen_range(-1.0..1.0));
            assert!(c.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn composition_examples() {
        assert_eq!(compose_reflected(&[0.1, 0.2, 0.3], 0.0, &[0.9; 3]), [0.1, 0.2, 0.3]);
        let c = compose_reflected(&[0.1; 3], 1.0, &[0.2, 0.3, 0.4]);
        for (a, b) in c.iter().zip([0.3f64, 0.4, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ambient_compose(1.0, &[0.2, 0.4, 0.6]), [1.0; 3]);
        assert_eq!(ambient_compose(0.0, &[0.2, 0.4, 0.6]), [0.2, 0.4, 0.6]);
        let l = ambient_compose(0.5, &[0.2, 0.4, 0.6]);
        for (a, b) in l.iter().zip([0.6f64, 0.7, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(point_color(&[0.3, 0.2, 0.1], &[1.0; 3]), [0.3, 0.2, 0.1]);
        assert_eq!(point_color(&[0.0; 3], &[0.4; 3]), [0.0; 3]);
    }

    #[test]
    fn lambertian_variant_is_view_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lf = LightField::<f64>::random(small_shape(Appearance::Lambertian), &mut rng);
        let f = [0.1, -0.4, 0.3, 0.9, -0.2, 0.5];
        let a = lf.respond(&f, &[0.0, 0.0, -1.0]);
        let b = lf.respond(&f, &[0.6, 0.0, -0.8]);
        assert_eq!(a.c_ref, b.c_ref);
        assert_eq!(a.c_ref, a.c_d);
    }
}
