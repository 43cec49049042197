//! The text-conditioned segmentation network: a three-stage strided conv
//! encoder, mean-pooled word embeddings, FiLM modulation of the bottleneck,
//! a three-stage upsampling decoder with skip connections, and projection
//! heads for the contrastive objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    conv_backward, conv_forward, group_norm_backward, group_norm_forward, l2_normalize,
    l2_normalize_backward, linear_backward, linear_forward, silu_backward, silu_forward,
    upsample2_backward, upsample2_forward, ConvGeom, NormCache, Shape3,
};
use super::tensor::{ParamSet, Real, Tensor};
use super::tokenizer::{TokenSequence, PAD_ID};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 3],
    pub max_tokens: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            image_size: 224,
            vocab_size,
            embed_dim: 64,
            proj_dim: 32,
            enc_channels: [16, 32, 64],
            dec_channels: [32, 16, 8],
            max_tokens: super::tokenizer::MAX_TOKENS,
        }
    }

    /// Same architecture at a different input resolution.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.enc_channels[2] != self.embed_dim {
            return Err(Error::Config(
                "bottleneck channels must equal the text embedding size".into(),
            ));
        }
        let all = self.enc_channels.iter().chain(&self.dec_channels);
        if all.clone().any(|&c| c == 0 || c % GROUP_SIZE != 0) {
            return Err(Error::Config(format!(
                "channel counts must be positive multiples of {GROUP_SIZE}"
            )));
        }
        if self.dec_channels[0] != self.enc_channels[1]
            || self.dec_channels[1] != self.enc_channels[0]
        {
            return Err(Error::Config(
                "decoder skips need matching channel counts".into(),
            ));
        }
        if self.vocab_size < 3 || self.proj_dim == 0 || self.max_tokens == 0 {
            return Err(Error::Config("degenerate vocabulary or head sizes".into()));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 8
    }
}

/// Channels per group-norm group.
const GROUP_SIZE: usize = 4;

const ENC: [&str; 3] = ["enc1", "enc2", "enc3"];
const DEC: [&str; 3] = ["dec1", "dec2", "dec3"];

struct BlockSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    stride: usize,
}

fn blocks(cfg: &ModelConfig) -> [BlockSpec; 6] {
    let [c1, c2, c3] = cfg.enc_channels;
    let [d1, d2, d3] = cfg.dec_channels;
    [
        BlockSpec {
            name: ENC[0],
            cin: 1,
            cout: c1,
            stride: 2,
        },
        BlockSpec {
            name: ENC[1],
            cin: c1,
            cout: c2,
            stride: 2,
        },
        BlockSpec {
            name: ENC[2],
            cin: c2,
            cout: c3,
            stride: 2,
        },
        BlockSpec {
            name: DEC[0],
            cin: c3,
            cout: d1,
            stride: 1,
        },
        BlockSpec {
            name: DEC[1],
            cin: d1,
            cout: d2,
            stride: 1,
        },
        BlockSpec {
            name: DEC[2],
            cin: d2,
            cout: d3,
            stride: 1,
        },
    ]
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::of(rng.gen_range(-bound..=bound)))
        .collect()
}

fn tensor<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Deterministic initialization for a given RNG state.
pub fn init_params<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ModelConfig,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    for b in blocks(cfg) {
        let fan_in = b.cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        p.insert(
            format!("{}.conv.weight", b.name),
            tensor(&[b.cout, b.cin, 3, 3], uniform(rng, b.cout * fan_in, bound)),
        );
        p.insert(format!("{}.conv.bias", b.name), Tensor::zeros(&[b.cout]));
        p.insert(
            format!("{}.norm.weight", b.name),
            tensor(&[b.cout], vec![T::one(); b.cout]),
        );
        p.insert(format!("{}.norm.bias", b.name), Tensor::zeros(&[b.cout]));
    }
    let e = cfg.embed_dim;
    let last = cfg.dec_channels[2];
    p.insert(
        "head.weight",
        tensor(
            &[1, last, 1, 1],
            uniform(rng, last, 1.0 / (last as f64).sqrt()),
        ),
    );
    p.insert("head.bias", Tensor::zeros(&[1]));
    p.insert(
        "text.embedding",
        tensor(&[cfg.vocab_size, e], uniform(rng, cfg.vocab_size * e, 0.5)),
    );
    // scale = 1 and shift = 0 for every input at init
    p.insert("film.weight", Tensor::zeros(&[2 * e, e]));
    let mut film_bias = vec![T::zero(); 2 * e];
    film_bias[..e].iter_mut().for_each(|v| *v = T::one());
    p.insert("film.bias", tensor(&[2 * e], film_bias));
    let bound = 1.0 / (e as f64).sqrt();
    for name in ["proj_image", "proj_text"] {
        p.insert(
            format!("{name}.weight"),
            tensor(&[cfg.proj_dim, e], uniform(rng, cfg.proj_dim * e, bound)),
        );
        p.insert(
            format!("{name}.bias"),
            tensor(&[cfg.proj_dim], uniform(rng, cfg.proj_dim, bound)),
        );
    }
    Ok(p)
}

/// Checks that `params` has exactly the tensors `cfg` prescribes.
pub fn check_params<T: Real>(params: &ParamSet<T>, cfg: &ModelConfig) -> Result<()> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let reference: ParamSet<T> = init_params(&mut rng, cfg)?;
    reference.ensure_compatible(params)
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `image_size x image_size` logits, empty for encoder-only passes.
    pub logits: Vec<T>,
    pub size: usize,
    /// Text-modulated bottleneck feature, `[C, h, w]`.
    pub fused: Vec<T>,
    pub fused_shape: Shape3,
    /// Unit-norm image embedding.
    pub image_embedding: Vec<T>,
    /// Unit-norm text embedding.
    pub text_embedding: Vec<T>,
}

impl<T: Real> ForwardOutput<T> {
    pub fn logits_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|v| v.f64()).collect()
    }

    /// Sigmoid probabilities as a grid.
    pub fn probabilities(&self) -> Grid {
        let p = self
            .logits
            .iter()
            .map(|v| crate::objectives::sigmoid(v.f64()))
            .collect();
        Grid::from_clamped(self.size, self.size, p, GridRole::Probability)
    }

    /// `logits >= 0` as a binary mask.
    pub fn binary_mask(&self) -> Grid {
        let m = self
            .logits
            .iter()
            .map(|v| if v.f64() >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        Grid::from_clamped(self.size, self.size, m, GridRole::BinaryMask)
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Vec<T>,
    in_shape: Shape3,
    out_shape: Shape3,
    norm: NormCache<T>,
    pre_act: Vec<T>,
}

/// Activations saved for [`backward`].
#[derive(Debug, Clone)]
pub struct Cache<T> {
    enc: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    e3: Vec<T>,
    token_ids: Vec<usize>,
    text: Vec<T>,
    film: Vec<T>,
    gap: Vec<T>,
    image_norm: f64,
    text_norm: f64,
    image_embedding: Vec<T>,
    text_embedding: Vec<T>,
    head_input: Vec<T>,
    head_shape: Shape3,
    fused_shape: Shape3,
}

fn geom(stride: usize) -> ConvGeom {
    ConvGeom { kernel: 3, stride }
}

fn block_forward<T: Real>(
    params: &ParamSet<T>,
    name: &str,
    cout: usize,
    stride: usize,
    x: Vec<T>,
    s: Shape3,
) -> (Vec<T>, BlockCache<T>) {
    let (z, os) = conv_forward(
        &x,
        s,
        params.data(&format!("{name}.conv.weight")),
        params.data(&format!("{name}.conv.bias")),
        cout,
        geom(stride),
    );
    let (y, norm) = group_norm_forward(
        &z,
        os,
        cout / GROUP_SIZE,
        params.data(&format!("{name}.norm.weight")),
        params.data(&format!("{name}.norm.bias")),
    );
    let a = silu_forward(&y);
    let cache = BlockCache {
        input: x,
        in_shape: s,
        out_shape: os,
        norm,
        pre_act: y,
    };
    (a, cache)
}

fn block_backward<T: Real>(
    params: &ParamSet<T>,
    grads: &mut ParamSet<T>,
    name: &str,
    stride: usize,
    cache: &BlockCache<T>,
    da: &[T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let os = cache.out_shape;
    let dy = silu_backward(&cache.pre_act, da);
    let gamma_name = format!("{name}.norm.weight");
    let beta_name = format!("{name}.norm.bias");
    let mut dgamma = vec![T::zero(); os.c];
    let mut dbeta = vec![T::zero(); os.c];
    let dz = group_norm_backward(
        &dy,
        os,
        os.c / GROUP_SIZE,
        params.data(&gamma_name),
        &cache.norm,
        &mut dgamma,
        &mut dbeta,
    );
    add_into(grads.data_mut(&gamma_name), &dgamma);
    add_into(grads.data_mut(&beta_name), &dbeta);
    let w_name = format!("{name}.conv.weight");
    let b_name = format!("{name}.conv.bias");
    let mut dw = vec![T::zero(); params.data(&w_name).len()];
    let mut db = vec![T::zero(); os.c];
    let dx = conv_backward(
        &cache.input,
        cache.in_shape,
        params.data(&w_name),
        &dz,
        os,
        geom(stride),
        &mut dw,
        &mut db,
        need_dx,
    );
    add_into(grads.data_mut(&w_name), &dw);
    add_into(grads.data_mut(&b_name), &db);
    dx
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

fn image_input<T: Real>(image: &Grid, cfg: &ModelConfig) -> Result<Vec<T>> {
    let n = cfg.image_size;
    if image.height() != n || image.width() != n {
        return Err(Error::Shape(format!(
            "model expects {n}x{n} images, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    Ok(image.data().iter().map(|&v| T::of(v)).collect())
}

fn token_ids(tokens: &TokenSequence, cfg: &ModelConfig) -> Result<Vec<usize>> {
    if tokens.ids.len() != cfg.max_tokens {
        return Err(Error::Shape(format!(
            "expected {} token ids, got {}",
            cfg.max_tokens,
            tokens.ids.len()
        )));
    }
    let mut ids = Vec::new();
    for &id in &tokens.ids {
        let id = id as usize;
        if id >= cfg.vocab_size {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if id != PAD_ID as usize {
            ids.push(id);
        }
    }
    Ok(ids)
}

/// Full forward pass.
pub fn forward<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    image: &Grid,
    tokens: &TokenSequence,
) -> Result<ForwardOutput<T>> {
    forward_with_cache(params, cfg, image, tokens, true).map(|(out, _)| out)
}

/// Forward pass that also returns the activations [`backward`] needs. With
/// `decode = false` only the encoder, text branch and projection heads run,
/// which is all the contrastive objective touches.
pub fn forward_with_cache<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    image: &Grid,
    tokens: &TokenSequence,
    decode: bool,
) -> Result<(ForwardOutput<T>, Cache<T>)> {
    let n = cfg.image_size;
    let x = image_input::<T>(image, cfg)?;
    let ids = token_ids(tokens, cfg)?;
    let specs = blocks(cfg);

    let mut enc = Vec::with_capacity(3);
    let mut feat = x;
    let mut shape = Shape3::new(1, n, n);
    for b in &specs[..3] {
        let (a, c) = block_forward(params, b.name, b.cout, b.stride, feat, shape);
        shape = c.out_shape;
        enc.push(c);
        feat = a;
    }
    let e3 = feat;
    let fused_shape = shape;

    let e = cfg.embed_dim;
    let table = params.data("text.embedding");
    let mut text = vec![T::zero(); e];
    if !ids.is_empty() {
        for &id in &ids {
            add_into(&mut text, &table[id * e..(id + 1) * e]);
        }
        let inv = T::of(1.0 / ids.len() as f64);
        text.iter_mut().for_each(|v| *v *= inv);
    }

    let film = linear_forward(&text, params.data("film.weight"), params.data("film.bias"));
    let plane = fused_shape.plane();
    let mut fused = vec![T::zero(); e3.len()];
    for c in 0..e {
        let (scale, shift) = (film[c], film[e + c]);
        for i in c * plane..(c + 1) * plane {
            fused[i] = scale * e3[i] + shift;
        }
    }
    let inv_plane = 1.0 / plane as f64;
    let gap: Vec<T> = (0..e)
        .map(|c| {
            T::of(
                fused[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| v.f64())
                    .sum::<f64>()
                    * inv_plane,
            )
        })
        .collect();
    let pi = linear_forward(
        &gap,
        params.data("proj_image.weight"),
        params.data("proj_image.bias"),
    );
    let (v, image_norm) = l2_normalize(&pi);
    let pt = linear_forward(
        &text,
        params.data("proj_text.weight"),
        params.data("proj_text.bias"),
    );
    let (u, text_norm) = l2_normalize(&pt);

    let mut dec = Vec::new();
    let mut logits = Vec::new();
    let mut head_input = Vec::new();
    let mut head_shape = Shape3::new(0, 0, 0);
    if decode {
        let mut feat = fused.clone();
        let mut shape = fused_shape;
        for (i, b) in specs[3..].iter().enumerate() {
            let (a, c) = block_forward(params, b.name, b.cout, b.stride, feat, shape);
            let (mut up, us) = upsample2_forward(&a, c.out_shape);
            dec.push(c);
            if i < 2 {
                // skip from the encoder stage at the same resolution
                add_into(&mut up, &enc_output(&enc, 1 - i));
            }
            feat = up;
            shape = us;
        }
        let w = params.data("head.weight");
        let (y, _) = conv_forward(
            &feat,
            shape,
            w,
            params.data("head.bias"),
            1,
            ConvGeom {
                kernel: 1,
                stride: 1,
            },
        );
        logits = y;
        head_input = feat;
        head_shape = shape;
    }

    let out = ForwardOutput {
        logits,
        size: n,
        fused,
        fused_shape,
        image_embedding: v.clone(),
        text_embedding: u.clone(),
    };
    let cache = Cache {
        enc,
        dec,
        e3,
        token_ids: ids,
        text,
        film,
        gap,
        image_norm,
        text_norm,
        image_embedding: v,
        text_embedding: u,
        head_input,
        head_shape,
        fused_shape,
    };
    Ok((out, cache))
}

/// Output of encoder block `i`, recovered as the input of block `i + 1`.
fn enc_output<T: Real>(enc: &[BlockCache<T>], i: usize) -> Vec<T> {
    enc[i + 1].input.clone()
}

/// Upstream gradients for [`backward`]; absent entries count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrads<'a, T> {
    pub logits: Option<&'a [T]>,
    pub image_embedding: Option<&'a [T]>,
    pub text_embedding: Option<&'a [T]>,
}

/// Accumulates parameter gradients into `grads`.
pub fn backward<T: Real>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    cache: &Cache<T>,
    seeds: OutputGrads<'_, T>,
    grads: &mut ParamSet<T>,
) -> Result<()> {
    let specs = blocks(cfg);
    let e = cfg.embed_dim;
    let fs = cache.fused_shape;
    let plane = fs.plane();
    let mut d_fused = vec![T::zero(); fs.len()];
    let mut d_e1 = vec![T::zero(); cache.enc[1].input.len()];
    let mut d_e2 = vec![T::zero(); cache.enc[2].input.len()];

    if let Some(dl) = seeds.logits {
        if cache.dec.len() != 3 {
            return Err(Error::InvalidArgument(
                "logit gradient given for an encoder-only pass".into(),
            ));
        }
        if dl.len() != cfg.image_size * cfg.image_size {
            return Err(Error::Shape(format!(
                "logit gradient has {} values",
                dl.len()
            )));
        }
        let hs = cache.head_shape;
        let mut dw = vec![T::zero(); hs.c];
        let mut db = vec![T::zero(); 1];
        let mut d = conv_backward(
            &cache.head_input,
            hs,
            params.data("head.weight"),
            dl,
            Shape3::new(1, hs.h, hs.w),
            ConvGeom {
                kernel: 1,
                stride: 1,
            },
            &mut dw,
            &mut db,
            true,
        )
        .expect("input gradient requested");
        add_into(grads.data_mut("head.weight"), &dw);
        add_into(grads.data_mut("head.bias"), &db);
        for i in (0..3).rev() {
            let c = &cache.dec[i];
            let da = upsample2_backward(&d, c.out_shape);
            let b = &specs[3 + i];
            d = block_backward(params, grads, b.name, b.stride, c, &da, true)
                .expect("input gradient requested");
            match i {
                2 => add_into(&mut d_e1, &d),
                1 => add_into(&mut d_e2, &d),
                _ => add_into(&mut d_fused, &d),
            }
        }
    }

    let mut d_text = vec![T::zero(); e];
    if let Some(dv) = seeds.image_embedding {
        let dpi = l2_normalize_backward(&cache.image_embedding, cache.image_norm, dv);
        let dgap = linear_grads(grads, params, "proj_image", &cache.gap, &dpi);
        let inv = T::of(1.0 / plane as f64);
        for c in 0..e {
            let g = dgap[c] * inv;
            d_fused[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += g);
        }
    }
    if let Some(du) = seeds.text_embedding {
        let dpt = l2_normalize_backward(&cache.text_embedding, cache.text_norm, du);
        let dt = linear_grads(grads, params, "proj_text", &cache.text, &dpt);
        add_into(&mut d_text, &dt);
    }

    // FiLM: fused = scale * e3 + shift
    let mut d_film = vec![T::zero(); 2 * e];
    let mut d_e3 = vec![T::zero(); fs.len()];
    for c in 0..e {
        let scale = cache.film[c];
        let (mut ds, mut dsh) = (T::zero(), T::zero());
        for i in c * plane..(c + 1) * plane {
            ds += d_fused[i] * cache.e3[i];
            dsh += d_fused[i];
            d_e3[i] = scale * d_fused[i];
        }
        d_film[c] = ds;
        d_film[e + c] = dsh;
    }
    let dt = linear_grads(grads, params, "film", &cache.text, &d_film);
    add_into(&mut d_text, &dt);

    if !cache.token_ids.is_empty() {
        let inv = T::of(1.0 / cache.token_ids.len() as f64);
        let table = grads.data_mut("text.embedding");
        for &id in &cache.token_ids {
            for (dst, g) in table[id * e..(id + 1) * e].iter_mut().zip(&d_text) {
                *dst += *g * inv;
            }
        }
    }

    let mut d = d_e3;
    for i in (0..3).rev() {
        let b = &specs[i];
        let dx = block_backward(params, grads, b.name, b.stride, &cache.enc[i], &d, i > 0);
        match i {
            2 => {
                d = dx.expect("input gradient requested");
                add_into(&mut d, &d_e2);
            }
            1 => {
                d = dx.expect("input gradient requested");
                add_into(&mut d, &d_e1);
            }
            _ => {}
        }
    }
    Ok(())
}

fn linear_grads<T: Real>(
    grads: &mut ParamSet<T>,
    params: &ParamSet<T>,
    name: &str,
    x: &[T],
    dy: &[T],
) -> Vec<T> {
    let w_name = format!("{name}.weight");
    let mut dw = vec![T::zero(); params.data(&w_name).len()];
    let mut db = vec![T::zero(); dy.len()];
    let dx = linear_backward(x, params.data(&w_name), dy, &mut dw, &mut db);
    add_into(grads.data_mut(&w_name), &dw);
    add_into(grads.data_mut(&format!("{name}.bias")), &db);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelConfig, Vocabulary) {
        let vocab = Vocabulary::from_corpus(["mild infection, upper left lung"]);
        (ModelConfig::new(vocab.len()).with_image_size(16), vocab)
    }

    fn image(n: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        Grid::new(n, n, data, GridRole::Image).unwrap()
    }

    /// Parameters with every tensor perturbed so no path is inactive.
    fn generic_params(cfg: &ModelConfig, seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: ParamSet<f64> = init_params(&mut rng, cfg).unwrap();
        for (_, t) in p.iter_mut() {
            for v in &mut t.data {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        p
    }

    #[test]
    fn shapes_norms_and_determinism() {
        let (cfg, vocab) = small();
        let p = generic_params(&cfg, 1);
        let tokens = vocab.tokenize("upper left lung");
        let a = forward(&p, &cfg, &image(16, 2), &tokens).unwrap();
        let b = forward(&p, &cfg, &image(16, 2), &tokens).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits.len(), 256);
        assert_eq!(a.fused_shape, Shape3::new(64, 2, 2));
        for e in [&a.image_embedding, &a.text_embedding] {
            let n: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(forward(&p, &cfg, &image(8, 2), &tokens).is_err());
    }

    #[test]
    fn film_is_identity_at_init() {
        let (cfg, vocab) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p: ParamSet<f64> = init_params(&mut rng, &cfg).unwrap();
        let (out, cache) = forward_with_cache(
            &p,
            &cfg,
            &image(16, 4),
            &vocab.tokenize("mild infection"),
            false,
        )
        .unwrap();
        assert_eq!(out.fused, cache.e3);
        assert!(out.logits.is_empty());
    }

    #[test]
    fn init_is_seeded() {
        let (cfg, _) = small();
        let a: ParamSet<f32> = init_params(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b: ParamSet<f32> = init_params(&mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let c: ParamSet<f32> = init_params(&mut ChaCha8Rng::seed_from_u64(6), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.num_values() < 500_000);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (cfg, vocab) = small();
        let p = generic_params(&cfg, 7);
        let img = image(16, 8);
        let tokens = vocab.tokenize("mild infection, upper left lung");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rl: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rv: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ru: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &ParamSet<f64>| {
            let o = forward(p, &cfg, &img, &tokens).unwrap();
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            dot(&o.logits, &rl) + dot(&o.image_embedding, &rv) + dot(&o.text_embedding, &ru)
        };
        let (_, cache) = forward_with_cache(&p, &cfg, &img, &tokens, true).unwrap();
        let mut g = p.zeros_like();
        let seeds = OutputGrads {
            logits: Some(&rl),
            image_embedding: Some(&rv),
            text_embedding: Some(&ru),
        };
        backward(&p, &cfg, &cache, seeds, &mut g).unwrap();
        let h = 1e-5;
        for name in p.names().cloned().collect::<Vec<_>>() {
            let n = p.data(&name).len();
            let mut num = vec![0.0; n];
            for (i, slot) in num.iter_mut().enumerate().step_by(n / 12 + 1) {
                let mut q = p.clone();
                q.data_mut(&name)[i] += h;
                let up = loss(&q);
                q.data_mut(&name)[i] -= 2.0 * h;
                *slot = (up - loss(&q)) / (2.0 * h);
            }
            let ana = g.data(&name);
            let (mut diff, mut scale) = (0.0f64, 0.0f64);
            for i in (0..n).step_by(n / 12 + 1) {
                diff += (ana[i] - num[i]).powi(2);
                scale += ana[i].powi(2) + num[i].powi(2);
            }
            let rel = diff.sqrt() / scale.sqrt().max(1e-12);
            assert!(rel < 1e-6, "{name}: relative error {rel}");
        }
    }
}
