//! Multi-scale 2D backbone, explicit 3D scale features, and the attentive
//! multi-scale feature module (AMFM).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::difftensor::{ParamStore, Tape, Tensor, Var};
use crate::error::{HvprError, Result};
use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Fwd, Linear};
use crate::pillars::{scatter_to_pseudo_image, GridSpec, PillarBatch};

pub const LEVELS: usize = 3;
pub const SCALE_DESCRIPTOR: usize = 5;
const ATTENTION_KERNEL: usize = 7;

/// Source of the spatial attention applied at each pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmfmMode {
    /// No refinement.
    Off,
    /// Attention pooled from the level features themselves.
    Features,
    /// Attention pooled from the downsampled 3D scale features.
    Scale,
}

#[derive(Debug, Clone, Copy)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        let y = self.bn.forward(f, y);
        f.tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Vec<ConvBnRelu>>,
    deblocks: Vec<(ConvTranspose2d, BatchNorm)>,
    pub channels: [usize; LEVELS],
}

impl Backbone {
    /// Levels at strides 2, 4, 8 with `c, 2c, 4c` channels; each level is
    /// upsampled back to stride 2 with `2c` channels for fusion.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        c: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(HvprError::Config(
                "backbone depth must be at least 1".into(),
            ));
        }
        let channels = [c, 2 * c, 4 * c];
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut ci = in_channels;
        for (l, &co) in channels.iter().enumerate() {
            let mut layers = Vec::with_capacity(depth);
            for d in 0..depth {
                let stride = if d == 0 { 2 } else { 1 };
                let cin = if d == 0 { ci } else { co };
                let prefix = format!("{name}.block{l}.{d}");
                layers.push(ConvBnRelu {
                    conv: Conv2d::new(
                        store,
                        &format!("{prefix}.conv"),
                        cin,
                        co,
                        3,
                        stride,
                        1,
                        false,
                        rng,
                    )?,
                    bn: BatchNorm::new(store, &format!("{prefix}.bn"), co)?,
                });
            }
            blocks.push(layers);
            ci = co;
        }
        let mut deblocks = Vec::with_capacity(LEVELS);
        for (l, &co) in channels.iter().enumerate() {
            let prefix = format!("{name}.up{l}");
            deblocks.push((
                ConvTranspose2d::new(store, &format!("{prefix}.deconv"), co, 2 * c, 1 << l, rng)?,
                BatchNorm::new(store, &format!("{prefix}.bn"), 2 * c)?,
            ));
        }
        Ok(Backbone {
            blocks,
            deblocks,
            channels,
        })
    }

    pub fn fused_channels(&self) -> usize {
        2 * self.channels[0] * LEVELS
    }
}

/// Feature maps at strides 2, 4 and 8 of the pseudo image.
pub fn backbone_forward(f: &mut Fwd, bb: &Backbone, image: Var) -> Result<Vec<Var>> {
    let s = f.tape.shape(image).to_vec();
    if s.len() != 3 || s[1] % 8 != 0 || s[2] % 8 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(HvprError::shape(
            "backbone_forward",
            format!("image {s:?} needs spatial extents divisible by 8"),
        ));
    }
    let mut x = image;
    let mut out = Vec::with_capacity(LEVELS);
    for block in &bb.blocks {
        for layer in block {
            x = layer.forward(f, x);
        }
        out.push(x);
    }
    Ok(out)
}

/// Upsamples every level to stride 2 and concatenates channels.
pub fn fuse_multiscale(f: &mut Fwd, bb: &Backbone, levels: &[Var]) -> Result<Var> {
    if levels.is_empty() || levels.len() > bb.deblocks.len() {
        return Err(HvprError::InvalidArgument(format!(
            "cannot fuse {} levels",
            levels.len()
        )));
    }
    let mut fused: Option<Var> = None;
    let mut target: Option<Vec<usize>> = None;
    for (&x, (deconv, bn)) in levels.iter().zip(&bb.deblocks) {
        let y = deconv.forward(f, x);
        let y = bn.forward(f, y);
        let y = f.tape.relu(y);
        let ys = f.tape.shape(y)[1..].to_vec();
        match &target {
            Some(t) if *t != ys => {
                return Err(HvprError::shape(
                    "fuse_multiscale",
                    format!("{ys:?} vs {t:?}"),
                ));
            }
            None => target = Some(ys),
            _ => {}
        }
        fused = Some(match fused {
            Some(acc) => f.tape.concat_rows(acc, y),
            None => y,
        });
    }
    Ok(fused.unwrap())
}

/// Per pillar: `(count, mean x, mean y, mean z, distance of the mean from the sensor)`.
pub fn compute_scale_descriptors(
    batch: &PillarBatch,
    origin: [f64; 3],
) -> Vec<[f64; SCALE_DESCRIPTOR]> {
    (0..batch.len())
        .map(|n| {
            let pts = batch.pillar_points(n);
            let k = pts.len() as f64;
            let mut m = [0.0; 3];
            for p in pts {
                for d in 0..3 {
                    m[d] += p[d] / k;
                }
            }
            let dist = ((m[0] - origin[0]).powi(2)
                + (m[1] - origin[1]).powi(2)
                + (m[2] - origin[2]).powi(2))
            .sqrt();
            [k, m[0], m[1], m[2], dist]
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Amfm {
    pub mode: AmfmMode,
    scale_encoder: Option<Linear>,
    down: Vec<Vec<Conv2d>>,
    attention: Vec<Conv2d>,
}

impl Amfm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: AmfmMode,
        c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut amfm = Amfm {
            mode,
            scale_encoder: None,
            down: Vec::new(),
            attention: Vec::new(),
        };
        if mode == AmfmMode::Off {
            return Ok(amfm);
        }
        if mode == AmfmMode::Scale {
            amfm.scale_encoder = Some(Linear::new(
                store,
                &format!("{name}.scale_encoder"),
                SCALE_DESCRIPTOR,
                c,
                true,
                rng,
            )?);
            for l in 0..LEVELS {
                let chain = (0..=l)
                    .map(|j| {
                        Conv2d::new(
                            store,
                            &format!("{name}.down{l}.{j}"),
                            c,
                            c,
                            3,
                            2,
                            1,
                            true,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                amfm.down.push(chain);
            }
        }
        for l in 0..LEVELS {
            amfm.attention.push(Conv2d::new(
                store,
                &format!("{name}.attention{l}"),
                2,
                1,
                ATTENTION_KERNEL,
                1,
                ATTENTION_KERNEL / 2,
                true,
                rng,
            )?);
        }
        Ok(amfm)
    }
}

/// Encodes descriptors per pillar (linear + ReLU) and scatters them to a
/// `[C, H', W']` map.
pub fn scale_feature_map(
    f: &mut Fwd,
    amfm: &Amfm,
    descriptors: &[[f64; SCALE_DESCRIPTOR]],
    coords: &[(usize, usize)],
    grid: &GridSpec,
) -> Result<Var> {
    let enc = amfm
        .scale_encoder
        .ok_or_else(|| HvprError::Config("scale features need AMFM mode `scale`".into()))?;
    let n = descriptors.len();
    let mut data = vec![0.0; SCALE_DESCRIPTOR * n];
    for (j, d) in descriptors.iter().enumerate() {
        for (k, v) in d.iter().enumerate() {
            data[k * n + j] = *v;
        }
    }
    let x = f.constant(Tensor::new(&[SCALE_DESCRIPTOR, n], data)?);
    let y = enc.forward(f, x);
    let y = f.tape.relu(y);
    scatter_to_pseudo_image(f.tape, y, coords, grid)
}

/// Applies the level's chain of stride-2 convolutions (`level + 1` of them).
pub fn downsample_scale_feature(
    f: &mut Fwd,
    amfm: &Amfm,
    map: Var,
    level: usize,
    target: &[usize],
) -> Result<Var> {
    let chain = amfm.down.get(level).ok_or_else(|| {
        HvprError::InvalidArgument(format!("no scale downsampler for level {level}"))
    })?;
    let mut x = map;
    for conv in chain {
        x = conv.forward(f, x);
    }
    let got = &f.tape.shape(x)[1..];
    if got != target {
        return Err(HvprError::shape(
            "downsample_scale_feature",
            format!("level {level}: {got:?} vs {target:?}"),
        ));
    }
    Ok(x)
}

/// Channel max and mean, a 2->1 convolution, then a sigmoid -> `[1, H, W]`.
pub fn amfm_attention(f: &mut Fwd, conv: &Conv2d, source: Var) -> Var {
    let mx = f.tape.channel_max(source);
    let mean = f.tape.channel_mean(source);
    let pooled = f.tape.concat_rows(mx, mean);
    let logits = conv.forward(f, pooled);
    f.tape.sigmoid(logits)
}

/// `F + A * F` with `A` broadcast over channels.
pub fn amfm_refine(tape: &mut Tape, features: Var, attention: Var) -> Result<Var> {
    let (fs, a) = (tape.shape(features), tape.shape(attention));
    if fs.len() != 3 || a.len() != 3 || a[0] != 1 || fs[1..] != a[1..] {
        return Err(HvprError::shape("amfm_refine", format!("{fs:?} vs {a:?}")));
    }
    let scaled = tape.mul_channel_broadcast(features, attention);
    Ok(tape.add(features, scaled))
}

/// Refines every level according to the AMFM mode. `scale_map` is required
/// in `Scale` mode.
pub fn amfm_forward(
    f: &mut Fwd,
    amfm: &Amfm,
    levels: &[Var],
    scale_map: Option<Var>,
) -> Result<Vec<Var>> {
    match amfm.mode {
        AmfmMode::Off => Ok(levels.to_vec()),
        AmfmMode::Features => levels
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let a = amfm_attention(f, &amfm.attention[l], x);
                amfm_refine(f.tape, x, a)
            })
            .collect(),
        AmfmMode::Scale => {
            let map = scale_map.ok_or_else(|| {
                HvprError::InvalidArgument("AMFM scale mode needs a scale map".into())
            })?;
            levels
                .iter()
                .enumerate()
                .map(|(l, &x)| {
                    let target = f.tape.shape(x)[1..].to_vec();
                    let s = downsample_scale_feature(f, amfm, map, l, &target)?;
                    let a = amfm_attention(f, &amfm.attention[l], s);
                    amfm_refine(f.tape, x, a)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difftensor::ParamBinder;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = 4;
        let bb = Backbone::new(&mut store, "bb", 2 * c, c, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store);
        let mut f = Fwd::new(&mut tape, &mut binder, Mode::Train);
        let x = f.constant(Tensor::zeros(&[2 * c, 32, 32]));
        let levels = backbone_forward(&mut f, &bb, x).unwrap();
        let shapes: Vec<Vec<usize>> = levels.iter().map(|&v| f.tape.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![c, 16, 16], vec![2 * c, 8, 8], vec![4 * c, 4, 4]]
        );
        for &v in &levels {
            assert!(f.tape.value(v).data().iter().all(|&x| x == 0.0));
        }
        let fused = fuse_multiscale(&mut f, &bb, &levels).unwrap();
        assert_eq!(f.tape.shape(fused), &[6 * c, 16, 16]);
        let bad = f.constant(Tensor::zeros(&[2 * c, 12, 12]));
        assert!(backbone_forward(&mut f, &bb, bad).is_err());
    }

    #[test]
    fn descriptors_hand_case() {
        let batch = PillarBatch {
            n_vox: 4,
            points: vec![
                [1.0, 0.0, 0.0, 0.1],
                [3.0, 0.0, 0.0, 0.2],
                [0.0; 4],
                [0.0; 4],
            ],
            coords: vec![(0, 0)],
            counts: vec![2],
        };
        assert_eq!(
            compute_scale_descriptors(&batch, [0.0; 3]),
            vec![[2.0, 2.0, 0.0, 0.0, 2.0]]
        );
    }

    #[test]
    fn refine_hand_case() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[2, 1, 1], 2.0));
        let a = tape.constant(Tensor::full(&[1, 1, 1], 0.25));
        let r = amfm_refine(&mut tape, f, a).unwrap();
        assert_eq!(tape.value(r).data(), &[2.5, 2.5]);
    }
}
