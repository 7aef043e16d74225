//! Shared-latent translation between the lesion and non-lesion patch domains:
//! two coupled VAEs whose deepest encoder block and first generator block are
//! one parameter set, plus a patch discriminator per domain.

mod loss;
mod train;

pub use loss::{diag_gaussian_kl, GanTerms, LossWeights, Objective, ObjectiveTerms, ParamGradients, TERM_NAMES};
pub use train::{train_translator, LossCurve, TranslatorTrainConfig, TrainedTranslator};

use std::path::Path;

use lesionforge_nn::{he_uniform, ConvGeom, Graph, ParamId, ParamStore, Scalar, StoreSnapshot, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Domain, Image};
use crate::error::{Error, Result};
use crate::seed::{stage_rng, StageRng};
use crate::tensors::{images_to_tensor, tensor_to_images};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorArch {
    /// Square patch side at model input.
    pub side: usize,
    pub base_channels: usize,
    /// Stride-2 stages; the latent grid is `side >> n_down` wide.
    pub n_down: usize,
    /// Domain-private residual blocks in each encoder and generator.
    pub n_res: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
}

impl Default for TranslatorArch {
    fn default() -> Self {
        Self { side: 32, base_channels: 8, n_down: 2, n_res: 1, disc_channels: 8, disc_layers: 2 }
    }
}

impl TranslatorArch {
    pub fn validate(&self) -> Result<()> {
        let fits = |levels: usize| levels < 16 && self.side.is_multiple_of(1 << levels) && self.side >> levels >= 1;
        if self.side == 0 || self.base_channels == 0 || self.disc_channels == 0 || self.disc_layers == 0 {
            return Err(Error::Config("translator sizes must be positive".into()));
        }
        if !fits(self.n_down) || !fits(self.disc_layers) {
            return Err(Error::Config(format!(
                "side {} is not divisible by 2^{} (encoder) and 2^{} (discriminator)",
                self.side, self.n_down, self.disc_layers
            )));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        self.base_channels << self.n_down
    }

    pub fn latent_side(&self) -> usize {
        self.side >> self.n_down
    }

    /// Shape of one sample's latent code, `[C, H, W]`.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels(), self.latent_side(), self.latent_side()]
    }
}

/// Mean of `q(z|x)` and the code actually decoded. The two coincide unless a
/// sampling rng was supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub mean: Tensor<T>,
    pub z: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ResIds {
    a: ConvIds,
    b: ConvIds,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    stem: ConvIds,
    down: Vec<ConvIds>,
    res: Vec<ResIds>,
}

#[derive(Clone, Debug)]
struct GeneratorIds {
    res: Vec<ResIds>,
    up: Vec<ConvIds>,
    out: ConvIds,
}

#[derive(Clone, Debug)]
struct DiscIds {
    layers: Vec<ConvIds>,
    out: ConvIds,
}

const SAME3: ConvGeom = ConvGeom { kernel: 3, stride: 1, padding: 1, dilation: 1 };
const DOWN4: ConvGeom = ConvGeom { kernel: 4, stride: 2, padding: 1, dilation: 1 };
const LEAK: f64 = 0.2;

pub(crate) fn domain_slot(d: Domain) -> Result<usize> {
    match d {
        Domain::Lesion => Ok(0),
        Domain::NonLesion => Ok(1),
        Domain::Generated => Err(Error::Data("the translator has no 'generated' domain".into())),
    }
}

/// Translator weights. Index 0 of every per-domain array is the lesion
/// domain, index 1 the non-lesion domain.
#[derive(Clone, Debug)]
pub struct Translator<T: Scalar> {
    arch: TranslatorArch,
    store: ParamStore<T>,
    enc: [EncoderIds; 2],
    gen: [GeneratorIds; 2],
    shared_enc: ResIds,
    shared_gen: ResIds,
    disc: [DiscIds; 2],
    pub seed: u64,
    pub epoch: usize,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut StageRng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> ConvIds {
        let shape = [cout, cin, k, k];
        let w = if zero { Tensor::zeros(&shape) } else { he_uniform(self.rng, &shape, cin * k * k) };
        ConvIds { w: self.store.add(format!("{name}.w"), w), b: self.store.add(format!("{name}.b"), Tensor::zeros(&[cout])) }
    }

    /// Transposed conv weights are laid out `[Cin, Cout, k, k]`.
    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let w = he_uniform(self.rng, &[cin, cout, k, k], cin * k * k / 4);
        ConvIds { w: self.store.add(format!("{name}.w"), w), b: self.store.add(format!("{name}.b"), Tensor::zeros(&[cout])) }
    }

    /// The second conv starts at zero so every block is the identity at init.
    fn res(&mut self, name: &str, c: usize) -> ResIds {
        ResIds { a: self.conv(&format!("{name}.a"), c, c, 3, false), b: self.conv(&format!("{name}.b"), c, c, 3, true) }
    }
}

impl<T: Scalar> Translator<T> {
    pub fn new(arch: TranslatorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stage_rng(seed, "translator-init");
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let c0 = arch.base_channels;
        let cl = arch.latent_channels();

        let encoder = |b: &mut Builder<T>, tag: &str| EncoderIds {
            stem: b.conv(&format!("enc_{tag}.stem"), 1, c0, 3, false),
            down: (0..arch.n_down).map(|i| b.conv(&format!("enc_{tag}.down{i}"), c0 << i, c0 << (i + 1), 4, false)).collect(),
            res: (0..arch.n_res).map(|i| b.res(&format!("enc_{tag}.res{i}"), cl)).collect(),
        };
        let enc = [encoder(&mut b, "l"), encoder(&mut b, "h")];
        let shared_enc = b.res("shared.enc", cl);
        let shared_gen = b.res("shared.gen", cl);
        let generator = |b: &mut Builder<T>, tag: &str| GeneratorIds {
            res: (0..arch.n_res).map(|i| b.res(&format!("gen_{tag}.res{i}"), cl)).collect(),
            up: (0..arch.n_down)
                .map(|i| {
                    let cin = cl >> i;
                    b.conv_t(&format!("gen_{tag}.up{i}"), cin, cin / 2, 4)
                })
                .collect(),
            out: b.conv(&format!("gen_{tag}.out"), c0, 1, 3, false),
        };
        let gen = [generator(&mut b, "l"), generator(&mut b, "h")];
        let dc = arch.disc_channels;
        let discriminator = |b: &mut Builder<T>, tag: &str| DiscIds {
            layers: (0..arch.disc_layers)
                .map(|i| {
                    let cin = if i == 0 { 1 } else { dc << (i - 1) };
                    b.conv(&format!("disc_{tag}.conv{i}"), cin, dc << i, 4, false)
                })
                .collect(),
            out: b.conv(&format!("disc_{tag}.out"), dc << (arch.disc_layers - 1), 1, 3, false),
        };
        let disc = [discriminator(&mut b, "l"), discriminator(&mut b, "h")];
        Ok(Self { arch, store, enc, gen, shared_enc, shared_gen, disc, seed, epoch: 0 })
    }

    pub fn arch(&self) -> &TranslatorArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn collect(ids: impl IntoIterator<Item = ConvIds>) -> Vec<ParamId> {
        ids.into_iter().flat_map(|c| [c.w, c.b]).collect()
    }

    fn res_convs(r: &[ResIds]) -> impl Iterator<Item = ConvIds> + '_ {
        r.iter().flat_map(|r| [r.a, r.b])
    }

    /// Parameters of the block referenced by both encoders and of the block
    /// referenced by both generators.
    pub fn shared_params(&self) -> Vec<ParamId> {
        Self::collect([self.shared_enc.a, self.shared_enc.b, self.shared_gen.a, self.shared_gen.b])
    }

    /// Encoder and generator parameters of both domains, shared blocks once.
    pub fn generator_params(&self) -> Vec<ParamId> {
        let mut convs = Vec::new();
        for e in &self.enc {
            convs.push(e.stem);
            convs.extend(&e.down);
            convs.extend(Self::res_convs(&e.res));
        }
        for g in &self.gen {
            convs.extend(Self::res_convs(&g.res));
            convs.extend(&g.up);
            convs.push(g.out);
        }
        let mut ids = Self::collect(convs);
        ids.extend(self.shared_params());
        ids
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        Self::collect(self.disc.iter().flat_map(|d| d.layers.iter().copied().chain([d.out])))
    }

    fn conv(g: &mut Graph<T>, x: Var, c: ConvIds, geom: ConvGeom) -> Result<Var> {
        Ok(g.conv2d(x, c.w, Some(c.b), geom)?)
    }

    fn res(g: &mut Graph<T>, x: Var, r: ResIds) -> Result<Var> {
        let h = Self::conv(g, x, r.a, SAME3)?;
        let h = g.relu(h);
        let h = Self::conv(g, h, r.b, SAME3)?;
        Ok(g.add(x, h)?)
    }

    fn check_input(&self, t: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = t.dims4()?;
        let s = self.arch.side;
        if (c, h, w) != (1, s, s) {
            return Err(Error::Data(format!("translator expects 1x{s}x{s} patches, got {c}x{h}x{w}")));
        }
        Ok(())
    }

    fn check_latent(&self, t: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = t.dims4()?;
        if [c, h, w] != self.arch.latent_shape() {
            return Err(Error::Data(format!(
                "latent code must be {:?}, got {:?}",
                self.arch.latent_shape(),
                [c, h, w]
            )));
        }
        Ok(())
    }

    /// Posterior mean for a `[B, 1, side, side]` batch.
    pub(crate) fn encode_graph(&self, g: &mut Graph<T>, slot: usize, x: Var) -> Result<Var> {
        let e = &self.enc[slot];
        let mut h = Self::conv(g, x, e.stem, SAME3)?;
        h = g.relu(h);
        for &d in &e.down {
            h = Self::conv(g, h, d, DOWN4)?;
            h = g.relu(h);
        }
        for &r in &e.res {
            h = Self::res(g, h, r)?;
        }
        Self::res(g, h, self.shared_enc)
    }

    pub(crate) fn decode_graph(&self, g: &mut Graph<T>, slot: usize, z: Var) -> Result<Var> {
        let gen = &self.gen[slot];
        let mut h = Self::res(g, z, self.shared_gen)?;
        for &r in &gen.res {
            h = Self::res(g, h, r)?;
        }
        for &u in &gen.up {
            h = g.conv_transpose2d(h, u.w, Some(u.b), DOWN4)?;
            h = g.relu(h);
        }
        let out = Self::conv(g, h, gen.out, SAME3)?;
        Ok(g.sigmoid(out))
    }

    /// Per-location discriminator logits.
    pub(crate) fn disc_graph(&self, g: &mut Graph<T>, slot: usize, x: Var) -> Result<Var> {
        let d = &self.disc[slot];
        let mut h = x;
        for &c in &d.layers {
            h = Self::conv(g, h, c, DOWN4)?;
            h = g.leaky_relu(h, LEAK);
        }
        Self::conv(g, h, d.out, SAME3)
    }

    /// `z = mean + ε` with standard-normal `ε`, or the mean itself without an rng.
    pub(crate) fn sample_graph(g: &mut Graph<T>, mean: Var, rng: Option<&mut StageRng>) -> Result<Var> {
        match rng {
            None => Ok(mean),
            Some(rng) => {
                let eps = standard_normal_like(g.value(mean), rng);
                let e = g.input(eps);
                Ok(g.add(mean, e)?)
            }
        }
    }

    pub fn encode_batch(&self, domain: Domain, x: &Tensor<T>, rng: Option<&mut StageRng>) -> Result<LatentCode<T>> {
        let slot = domain_slot(domain)?;
        self.check_input(x)?;
        let mut g = Graph::new(&self.store);
        let xv = g.input(x.clone());
        let mean = self.encode_graph(&mut g, slot, xv)?;
        let z = Self::sample_graph(&mut g, mean, rng)?;
        Ok(LatentCode { mean: g.value(mean).clone(), z: g.value(z).clone() })
    }

    pub fn decode_batch(&self, domain: Domain, z: &Tensor<T>) -> Result<Tensor<T>> {
        let slot = domain_slot(domain)?;
        self.check_latent(z)?;
        let mut g = Graph::new(&self.store);
        let zv = g.input(z.clone());
        let out = self.decode_graph(&mut g, slot, zv)?;
        Ok(g.value(out).clone())
    }

    /// `decode(to, encode(from, x).mean)`.
    pub fn translate_batch(&self, x: &Tensor<T>, from: Domain, to: Domain) -> Result<Tensor<T>> {
        let code = self.encode_batch(from, x, None)?;
        self.decode_batch(to, &code.mean)
    }

    pub fn encode(&self, domain: Domain, patch: &Image, rng: Option<&mut StageRng>) -> Result<LatentCode<T>> {
        self.encode_batch(domain, &images_to_tensor(&[patch])?, rng)
    }

    pub fn decode(&self, domain: Domain, z: &Tensor<T>) -> Result<Image> {
        let out = self.decode_batch(domain, z)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    pub fn translate(&self, patch: &Image, from: Domain, to: Domain) -> Result<Image> {
        let out = self.translate_batch(&images_to_tensor(&[patch])?, from, to)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }

    /// Translates many patches in fixed-size chunks.
    pub fn translate_images(&self, patches: &[Image], from: Domain, to: Domain) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(16) {
            let refs: Vec<&Image> = chunk.iter().collect();
            out.extend(tensor_to_images(&self.translate_batch(&images_to_tensor(&refs)?, from, to)?)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, weights: LossWeights, scale_factor: Option<f64>) -> TranslatorCheckpoint {
        TranslatorCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            arch: self.arch,
            loss_weights: weights,
            seed: self.seed,
            epoch: self.epoch,
            scale_factor,
            params: self.store.snapshot(),
        }
    }

    pub fn from_checkpoint(ck: &TranslatorCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != 1 {
            return Err(Error::Data(format!("not a translator checkpoint: {} v{}", ck.format, ck.version)));
        }
        let mut t = Self::new(ck.arch, ck.seed)?;
        t.store.restore(&ck.params)?;
        t.epoch = ck.epoch;
        Ok(t)
    }
}

fn standard_normal_like<T: Scalar>(like: &Tensor<T>, rng: &mut StageRng) -> Tensor<T> {
    let data = (0..like.len()).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(like.shape(), data).expect("shape copied from an existing tensor")
}

const CHECKPOINT_FORMAT: &str = "lesionforge-translator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorCheckpoint {
    pub format: String,
    pub version: u32,
    pub arch: TranslatorArch,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub epoch: usize,
    /// Patch scale factor the translator was trained with.
    pub scale_factor: Option<f64>,
    pub params: StoreSnapshot,
}

impl TranslatorCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::dataio::read_json(path)
    }
}

#[cfg(test)]
mod tests;
