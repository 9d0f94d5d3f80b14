//! The full radiance model: density, reflectance and ambient fields plus the
//! light-field heads.

use rand::Rng;

use crate::config::Config;
use crate::field::{level_resolutions, Activation, Aggregation, Decomposition, MultiscaleField, TensorLevel};
use crate::geometry::SceneBounds;
use crate::lightfield::{ambient_compose, point_color, Appearance, LightField, Linear, Mlp};
use crate::real::Real;

/// Which learning rate a parameter block follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Tensor,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Sigma,
    Reflect,
    AmbColor,
    AmbLambda,
}

impl FieldKind {
    pub const ALL: [FieldKind; 4] = [Self::Sigma, Self::Reflect, Self::AmbColor, Self::AmbLambda];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigma => "sigma",
            Self::Reflect => "reflect",
            Self::AmbColor => "amb_color",
            Self::AmbLambda => "amb_lambda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    A,
    B,
    D,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::D => "D",
        }
    }
}

/// Name, shape and group of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl BlockInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadianceModel<T> {
    pub bounds: SceneBounds,
    pub density_scale: f64,
    /// Density: mean over levels, softplus, then mean over channels.
    pub sigma: MultiscaleField<T>,
    /// Appearance features, concatenated over levels.
    pub reflect: MultiscaleField<T>,
    pub amb_color: MultiscaleField<T>,
    /// Ambient factor: mean of its sigmoid channels.
    pub amb_lambda: MultiscaleField<T>,
    pub light: LightField<T>,
}

/// Gradient buffers share the model's layout.
pub type ModelGradients<T> = RadianceModel<T>;

/// Per-axis grid size for a nominal resolution `n` along the longest side,
/// keeping voxels roughly cubic.
pub fn axis_resolution(bounds: &SceneBounds, n: usize) -> [usize; 3] {
    let ext = bounds.extent();
    let m = bounds.max_extent();
    [0, 1, 2].map(|a| ((n as f64 * ext[a] / m).round() as usize).max(2))
}

/// Finest voxel edge of a field configuration in world units.
pub fn finest_voxel(bounds: &SceneBounds, max_res: usize) -> f64 {
    let res = axis_resolution(bounds, max_res);
    let ext = bounds.extent();
    (0..3)
        .map(|a| ext[a] / (res[a] - 1) as f64)
        .fold(0.0, f64::max)
}

/// Parameter count implied by `cfg` on `bounds`, from grid sizes and layer
/// widths alone: `R C (Nx + Ny + Nz + Ny Nz + Nx Nz + Nx Ny)` per VM level,
/// `R C (Nx + Ny + Nz)` per CP level, `(in + 1) out` per dense layer.
pub fn closed_form_param_count(cfg: &Config, bounds: &SceneBounds) -> usize {
    let f = &cfg.field;
    let level = |n: usize, channels: usize| {
        let [x, y, z] = axis_resolution(bounds, n);
        let planes = match f.decomposition {
            Decomposition::Vm => y * z + x * z + x * y,
            Decomposition::Cp => 0,
        };
        f.rank * channels * (x + y + z + planes)
    };
    let multiscale: usize = level_resolutions(f.base_res, f.max_res, f.levels)
        .into_iter()
        .map(|n| level(n, f.channels))
        .sum();
    let fields = 2 * multiscale + level(f.ambient_res, 3) + level(f.ambient_res, 2);

    let dense = |widths: &[usize]| widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum::<usize>();
    let l = &cfg.light;
    let features = f.levels * f.channels;
    let hidden = if l.head_a_depth > 1 { l.head_a_width } else { features };
    let mut a = vec![features];
    a.extend(std::iter::repeat(l.head_a_width).take(l.head_a_depth.saturating_sub(1)));
    a.push(7);
    let heads = dense(&a)
        + match l.appearance {
            Appearance::Asg => {
                dense(&[hidden, l.head_b_width, l.lobes * (l.asg_dim + 2)])
                    + dense(&[l.asg_dim + 1, l.head_d_width, 3])
            }
            Appearance::Sh => dense(&[hidden, l.head_b_width, 3 * (l.sh_degree + 1).pow(2)]),
            Appearance::Lambertian => 0,
        };
    fields + heads
}

fn build_field<T: Real, R: Rng + ?Sized>(
    cfg: &Config,
    bounds: &SceneBounds,
    sizes: &[usize],
    channels: usize,
    aggregation: Aggregation,
    activation: Activation,
    rng: &mut R,
) -> MultiscaleField<T> {
    let levels = sizes
        .iter()
        .map(|&n| {
            TensorLevel::random(
                cfg.field.decomposition,
                axis_resolution(bounds, n),
                cfg.field.rank,
                channels,
                cfg.field.init_std,
                rng,
            )
        })
        .collect();
    MultiscaleField::new(levels, aggregation, activation).expect("consistent level shapes")
}

impl<T: Real> RadianceModel<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &Config, bounds: SceneBounds, rng: &mut R) -> Self {
        let f = &cfg.field;
        let sizes = level_resolutions(f.base_res, f.max_res, f.levels);
        let amb = [f.ambient_res];
        let sigma = build_field(cfg, &bounds, &sizes, f.channels, Aggregation::Mean, Activation::Softplus, rng);
        let reflect = build_field(cfg, &bounds, &sizes, f.channels, Aggregation::Concat, Activation::None, rng);
        let amb_color = build_field(cfg, &bounds, &amb, 3, Aggregation::Mean, Activation::Sigmoid, rng);
        let amb_lambda = build_field(cfg, &bounds, &amb, 2, Aggregation::Mean, Activation::Sigmoid, rng);
        let light = LightField::random(cfg.light_shape(), rng);
        Self {
            bounds,
            density_scale: f.density_scale,
            sigma,
            reflect,
            amb_color,
            amb_lambda,
            light,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            bounds: self.bounds,
            density_scale: self.density_scale,
            sigma: self.sigma.zeros_like(),
            reflect: self.reflect.zeros_like(),
            amb_color: self.amb_color.zeros_like(),
            amb_lambda: self.amb_lambda.zeros_like(),
            light: self.light.zeros_like(),
        }
    }

    pub fn field(&self, kind: FieldKind) -> &MultiscaleField<T> {
        match kind {
            FieldKind::Sigma => &self.sigma,
            FieldKind::Reflect => &self.reflect,
            FieldKind::AmbColor => &self.amb_color,
            FieldKind::AmbLambda => &self.amb_lambda,
        }
    }

    pub fn field_mut(&mut self, kind: FieldKind) -> &mut MultiscaleField<T> {
        match kind {
            FieldKind::Sigma => &mut self.sigma,
            FieldKind::Reflect => &mut self.reflect,
            FieldKind::AmbColor => &mut self.amb_color,
            FieldKind::AmbLambda => &mut self.amb_lambda,
        }
    }

    pub fn head(&self, kind: HeadKind) -> Option<&Mlp<T>> {
        match kind {
            HeadKind::A => Some(&self.light.head_a),
            HeadKind::B => self.light.head_b.as_ref(),
            HeadKind::D => self.light.head_d.as_ref(),
        }
    }

    pub fn head_mut(&mut self, kind: HeadKind) -> Option<&mut Mlp<T>> {
        match kind {
            HeadKind::A => Some(&mut self.light.head_a),
            HeadKind::B => self.light.head_b.as_mut(),
            HeadKind::D => self.light.head_d.as_mut(),
        }
    }

    pub fn layer(&self, head: HeadKind, layer: usize) -> &Linear<T> {
        &self.head(head).expect("head present").layers[layer]
    }

    pub fn layer_mut(&mut self, head: HeadKind, layer: usize) -> &mut Linear<T> {
        &mut self.head_mut(head).expect("head present").layers[layer]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(BlockInfo::len).sum()
    }

    /// Every trainable block in a fixed order, named
    /// `field/<name>/level<l>/<factor>` and `mlp/<head>/layer<i>/{weight,bias}`.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        for kind in FieldKind::ALL {
            for (name, shape, _) in self.field(kind).grids() {
                out.push(BlockInfo {
                    name: format!("field/{}/{}", kind.name(), name),
                    shape,
                    group: ParamGroup::Tensor,
                });
            }
        }
        for head in [HeadKind::A, HeadKind::B, HeadKind::D] {
            if let Some(mlp) = self.head(head) {
                for (i, l) in mlp.layers.iter().enumerate() {
                    out.push(BlockInfo {
                        name: format!("mlp/{}/layer{i}/weight", head.name()),
                        shape: vec![l.out_dim, l.in_dim],
                        group: ParamGroup::Mlp,
                    });
                    out.push(BlockInfo {
                        name: format!("mlp/{}/layer{i}/bias", head.name()),
                        shape: vec![l.out_dim],
                        group: ParamGroup::Mlp,
                    });
                }
            }
        }
        out
    }

    /// Block storage in the order of [`Self::blocks`].
    pub fn block_data(&self) -> Vec<&Vec<T>> {
        let mut out = Vec::new();
        for kind in FieldKind::ALL {
            out.extend(self.field(kind).grids().into_iter().map(|(_, _, g)| g));
        }
        for head in [HeadKind::A, HeadKind::B, HeadKind::D] {
            if let Some(mlp) = self.head(head) {
                for l in &mlp.layers {
                    out.push(&l.weight);
                    out.push(&l.bias);
                }
            }
        }
        out
    }

    pub fn block_data_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        out.extend(self.sigma.grids_mut());
        out.extend(self.reflect.grids_mut());
        out.extend(self.amb_color.grids_mut());
        out.extend(self.amb_lambda.grids_mut());
        let light = &mut self.light;
        for mlp in std::iter::once(&mut light.head_a)
            .chain(light.head_b.as_mut())
            .chain(light.head_d.as_mut())
        {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> RadianceModel<U> {
        let mut out = RadianceModel::<U> {
            bounds: self.bounds,
            density_scale: self.density_scale,
            sigma: cast_field(&self.sigma),
            reflect: cast_field(&self.reflect),
            amb_color: cast_field(&self.amb_color),
            amb_lambda: cast_field(&self.amb_lambda),
            light: crate::lightfield::LightField::zeros(self.light.shape.clone()),
        };
        out.light.lobes = self.light.lobes.clone();
        let src = self.block_data();
        debug_assert_eq!(src.len(), out.block_data().len());
        for (d, s) in out.block_data_mut().into_iter().zip(src) {
            for (a, b) in d.iter_mut().zip(s) {
                *a = U::c(b.f64());
            }
        }
        out
    }

    /// Adds `other` into `self` block by block.
    pub fn add_assign(&mut self, other: &Self) {
        for (d, s) in self.block_data_mut().into_iter().zip(other.block_data()) {
            for (a, b) in d.iter_mut().zip(s) {
                *a += *b;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for d in self.block_data_mut() {
            d.fill(T::zero());
        }
    }

    /// Density at a normalized point.
    pub fn density(&self, p: &[T; 3]) -> T {
        let f = self.sigma.sample(p);
        let mean = f.iter().copied().sum::<T>() / T::c(f.len() as f64);
        T::c(self.density_scale) * mean
    }

    /// Ambient factor at a normalized point.
    pub fn ambient_lambda(&self, p: &[T; 3]) -> T {
        let f = self.amb_lambda.sample(p);
        f.iter().copied().sum::<T>() / T::c(f.len() as f64)
    }

    /// Emitted color at a normalized point seen along unit `dir`, evaluated
    /// one point at a time without the tape.
    pub fn color(&self, p: &[T; 3], dir: &[T; 3]) -> [T; 3] {
        let feature = self.reflect.sample(p);
        let resp = self.light.respond(&feature, dir);
        let c = self.amb_color.sample(p);
        let l = ambient_compose(self.ambient_lambda(p), &[c[0], c[1], c[2]]);
        point_color(&resp.c_ref, &l)
    }
}

fn cast_field<T: Real, U: Real>(f: &MultiscaleField<T>) -> MultiscaleField<U> {
    let levels = f
        .levels
        .iter()
        .map(|l| {
            let mut out = TensorLevel::<U>::zeros(l.kind, l.res, l.rank, l.channels);
            for ((_, s), d) in l.grids().zip(out.grids_mut()) {
                for (a, b) in d.iter_mut().zip(s) {
                    *a = U::c(b.f64());
                }
            }
            out
        })
        .collect();
    MultiscaleField {
        levels,
        aggregation: f.aggregation,
        activation: f.activation,
    }
}
