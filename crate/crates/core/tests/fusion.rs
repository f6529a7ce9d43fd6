use gde_core::fusion::checkpoint::{read_checkpoint, write_checkpoint, MAGIC};
use gde_core::fusion::layers::attention_forward;
use gde_core::fusion::model::{decode, encode, DecoderLayerWeights, LayerWeights};
use gde_core::fusion::{
    AttentionMask, FeatureMap, FusionModel, FusionParams, Mat, MaskMode, ModelConfig, PositionEncoding,
};
use gde_core::ground::GroundDepthMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Grid = Vec<Vec<f64>>;

fn random_map(rng: &mut ChaCha8Rng, ws: usize, hs: usize, c: usize) -> FeatureMap<f64> {
    let m = Mat::from_fn(ws * hs, c, |_, _| rng.gen_range(-1.0..1.0));
    FeatureMap::new(ws, hs, m).unwrap()
}

fn random_model(seed: u64, config: ModelConfig) -> FusionModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FusionModel::random(config, &mut rng).unwrap();
    // exercise the norm affine terms and biases too
    model.params.for_each_tensor_mut(|name, t| {
        if name.ends_with("gamma") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if name.ends_with("beta") || name.ends_with("bias") {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    });
    model
}

fn to_grid(m: &Mat<f64>) -> Grid {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn max_diff(a: &Grid, b: &Grid) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

// Naive reference implementation, written directly from the layer definitions.

fn ref_ln(x: &Grid, gamma: &[f64], beta: &[f64]) -> Grid {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) / sd * gamma[c] + beta[c]).collect()
        })
        .collect()
}

fn ref_matmul(x: &Grid, w: &Mat<f64>) -> Grid {
    x.iter()
        .map(|row| (0..w.cols()).map(|j| (0..w.rows()).map(|i| row[i] * w.get(i, j)).sum()).collect())
        .collect()
}

/// Softmax restricted to allowed keys; per-head slices of q/k/v.
fn ref_attention(q: &Grid, k: &Grid, v: &Grid, mask: &AttentionMask, heads: usize) -> Grid {
    let n = q.len();
    let dk = q[0].len() / heads;
    let dv = v[0].len() / heads;
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    mask.allows(i, j).then(|| {
                        (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                })
                .collect();
            let top = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = logits.iter().flatten().map(|s| (s - top).exp()).sum();
            for (j, s) in logits.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - top).exp() / z;
                    for c in 0..dv {
                        out[i][h * dv + c] += w * v[j][h * dv + c];
                    }
                }
            }
        }
    }
    out
}

fn ref_conv(x: &Grid, ws: usize, hs: usize, conv: &gde_core::fusion::layers::Conv3x3<f64>) -> Grid {
    let mut out = vec![vec![0.0; conv.c_out]; ws * hs];
    for r in 0..hs as isize {
        for c in 0..ws as isize {
            for co in 0..conv.c_out {
                let mut acc = conv.bias[co];
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (rr, cc) = (r + dy, c + dx);
                        if rr < 0 || cc < 0 || rr >= hs as isize || cc >= ws as isize {
                            continue;
                        }
                        let src = &x[(rr as usize) * ws + cc as usize];
                        for ci in 0..conv.c_in {
                            acc += conv.tap(co, ci, (dy + 1) as usize, (dx + 1) as usize) * src[ci];
                        }
                    }
                }
                out[(r as usize) * ws + c as usize][co] = acc;
            }
        }
    }
    out
}

fn add(a: &mut Grid, b: &Grid) {
    for (x, y) in a.iter_mut().zip(b) {
        for (p, q) in x.iter_mut().zip(y) {
            *p += q;
        }
    }
}

fn ref_ffn(x: &mut Grid, ws: usize, hs: usize, norm: &gde_core::fusion::layers::LayerNorm<f64>, ffn: &gde_core::fusion::model::ConvFfn<f64>) {
    let xn = ref_ln(x, &norm.gamma, &norm.beta);
    let mut a = ref_conv(&xn, ws, hs, &ffn.conv1);
    a.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
    let y = ref_conv(&a, ws, hs, &ffn.conv2);
    add(x, &y);
}

fn ref_encode(img: &Grid, pe: &Grid, ws: usize, hs: usize, layers: &[LayerWeights<f64>], mask: &AttentionMask, heads: usize) -> Grid {
    let mut x = img.clone();
    add(&mut x, pe);
    for l in layers {
        let xn = ref_ln(&x, &l.norm_attn.gamma, &l.norm_attn.beta);
        let o = ref_attention(&ref_matmul(&xn, &l.attn.wq), &ref_matmul(&xn, &l.attn.wk), &ref_matmul(&xn, &l.attn.wv), mask, heads);
        add(&mut x, &o);
        ref_ffn(&mut x, ws, hs, &l.norm_ffn, &l.ffn);
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn ref_decode(
    depth: &[f64],
    memory: &Grid,
    pe: &Grid,
    ws: usize,
    hs: usize,
    model: &FusionParams<f64>,
    mask: &AttentionMask,
    heads: usize,
) -> Grid {
    let c = memory[0].len();
    let mut x: Grid = (0..depth.len())
        .map(|i| (0..c).map(|ch| depth[i] * model.embed.weight[ch] + model.embed.bias[ch] + pe[i][ch]).collect())
        .collect();
    for l in &model.decoder {
        let xn = ref_ln(&x, &l.norm_self.gamma, &l.norm_self.beta);
        let o = ref_attention(
            &ref_matmul(&xn, &l.self_attn.wq),
            &ref_matmul(&xn, &l.self_attn.wk),
            &ref_matmul(&xn, &l.self_attn.wv),
            mask,
            heads,
        );
        add(&mut x, &o);

        let xn = ref_ln(&x, &l.norm_cross.gamma, &l.norm_cross.beta);
        let q = ref_matmul(&xn, &l.cross.wq);
        let k = ref_matmul(memory, &l.cross.wk);
        let ve = ref_matmul(memory, &l.cross.wv_enc);
        let vd = ref_matmul(&xn, &l.cross.wv_dec);
        // each head sees its encoder slice followed by its decoder slice
        let d = c / heads;
        let v: Grid = ve
            .iter()
            .zip(&vd)
            .map(|(e, dd)| (0..heads).flat_map(|h| e[h * d..(h + 1) * d].iter().chain(&dd[h * d..(h + 1) * d]).copied()).collect())
            .collect();
        let o = ref_attention(&q, &k, &v, mask, heads);
        add(&mut x, &ref_matmul(&o, &l.cross.wo));

        ref_ffn(&mut x, ws, hs, &l.norm_ffn, &l.ffn);
    }
    x
}

fn golden_setup(mode: MaskMode) -> (FusionModel<f64>, FeatureMap<f64>, Vec<f64>, PositionEncoding<f64>, AttentionMask) {
    let (ws, hs, c) = (8, 8, 4);
    let config = ModelConfig { channels: c, heads: 2, window_radius: 2, mask_mode: mode, ..ModelConfig::default() };
    let model = random_model(2024, config);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let img = random_map(&mut rng, ws, hs, c);
    let depth: Vec<f64> = (0..ws * hs).map(|_| rng.gen_range(0.0..2.0)).collect();
    let pe = PositionEncoding::sinusoidal(ws, hs, c).unwrap();
    let mask = AttentionMask::window(ws, hs, config.window_radius);
    (model, img, depth, pe, mask)
}

#[test]
fn forward_matches_naive_reference() {
    for mode in [MaskMode::Renormalize, MaskMode::Additive] {
        let (model, img, depth, pe, mask) = golden_setup(mode);
        let (ws, hs) = (img.ws(), img.hs());
        let heads = model.config.heads;
        let trace = model.forward(&img, &depth, &pe, &mask).unwrap();

        let enc = ref_encode(&to_grid(img.matrix()), &to_grid(pe.matrix()), ws, hs, &model.params.encoder, &mask, heads);
        assert!(max_diff(&to_grid(trace.encoder_output().matrix()), &enc) < 1e-12);

        let dec = ref_decode(&depth, &enc, &to_grid(pe.matrix()), ws, hs, &model.params, &mask, heads);
        assert!(max_diff(&to_grid(trace.output().matrix()), &dec) < 1e-12, "{mode:?}");
    }
}

#[test]
fn public_encode_decode_agree_with_model() {
    let (model, img, depth, pe, mask) = golden_setup(MaskMode::Renormalize);
    let opts = model.config.attention_options();
    let enc = encode(&img, &pe, &model.params.encoder, &mask, opts).unwrap();
    let map = GroundDepthMap::from_values(img.ws(), img.hs(), depth.clone(), depth.clone()).unwrap();
    let dec = decode(&map, &enc, &pe, &model.params.decoder, &model.params.embed, &mask, opts).unwrap();
    let trace = model.forward(&img, &depth, &pe, &mask).unwrap();
    assert_eq!(enc.matrix(), trace.encoder_output().matrix());
    assert_eq!(dec.matrix(), trace.output().matrix());
    assert_eq!((dec.ws(), dec.hs(), dec.channels()), (8, 8, 4));
}

#[test]
fn forward_is_deterministic() {
    let (a, img, depth, pe, mask) = golden_setup(MaskMode::Renormalize);
    let (b, ..) = golden_setup(MaskMode::Renormalize);
    assert_eq!(a, b);
    let ta = a.forward(&img, &depth, &pe, &mask).unwrap();
    let tb = b.forward(&img, &depth, &pe, &mask).unwrap();
    assert_eq!(ta.output().matrix(), tb.output().matrix());
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ws, hs, c) = (5, 4, 4);
    let n = ws * hs;
    let rand_mat = |rng: &mut ChaCha8Rng| Mat::from_fn(n, c, |_, _| rng.gen_range(-1.0..1.0));
    let (q, k, v) = (rand_mat(&mut rng), rand_mat(&mut rng), rand_mat(&mut rng));
    let mask = AttentionMask::window(ws, hs, 1);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let permute = |m: &Mat<f64>| {
        let mut out = Mat::zeros(m.rows(), m.cols());
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(p).copy_from_slice(m.row(i));
        }
        out
    };
    for mode in [MaskMode::Renormalize, MaskMode::Additive] {
        let (out, _) = attention_forward(&q, &k, &v, &mask, 2, mode).unwrap();
        let (pout, _) = attention_forward(&permute(&q), &permute(&k), &permute(&v), &mask.permuted(&perm), 2, mode).unwrap();
        assert!(max_diff(&to_grid(&permute(&out)), &to_grid(&pout)) < 1e-14);
    }
}

fn mirror_kernels(p: &mut FusionParams<f64>) {
    p.for_each_tensor_mut(|name, t| {
        if name.ends_with(".kernel") {
            for tap in t.chunks_mut(3) {
                tap[2] = tap[0];
            }
        }
    });
}

#[test]
fn model_commutes_with_horizontal_flip() {
    let (ws, hs, c) = (6, 5, 4);
    let config = ModelConfig { channels: c, heads: 2, window_radius: 2, ..ModelConfig::default() };
    let mut model = random_model(17, config);
    mirror_kernels(&mut model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_map(&mut rng, ws, hs, c);
    let depth: Vec<f64> = (0..ws * hs).map(|_| rng.gen_range(0.0..1.0)).collect();
    let flip = |i: usize| (i / ws) * ws + (ws - 1 - i % ws);
    let perm: Vec<usize> = (0..ws * hs).map(flip).collect();

    let mut flipped = Mat::zeros(ws * hs, c);
    for i in 0..ws * hs {
        flipped.row_mut(perm[i]).copy_from_slice(img.matrix().row(i));
    }
    let img_f = FeatureMap::new(ws, hs, flipped).unwrap();
    let mut depth_f = vec![0.0; ws * hs];
    for i in 0..ws * hs {
        depth_f[perm[i]] = depth[i];
    }
    // the sinusoidal encoding is not mirror symmetric
    let pe = PositionEncoding::zeros(ws, hs, c);
    let mask = AttentionMask::window(ws, hs, 2);
    let a = model.forward(&img, &depth, &pe, &mask).unwrap();
    let b = model.forward(&img_f, &depth_f, &pe, &mask).unwrap();
    for i in 0..ws * hs {
        for ch in 0..c {
            assert!((a.output().matrix().get(i, ch) - b.output().matrix().get(perm[i], ch)).abs() < 1e-12);
            assert!(
                (a.encoder_output().matrix().get(i, ch) - b.encoder_output().matrix().get(perm[i], ch)).abs() < 1e-12
            );
        }
    }
}

#[test]
fn attention_rows_normalized_and_windowed() {
    let (ws, hs, c) = (9, 7, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for radius in [0, 1, 3] {
        let mask = AttentionMask::window(ws, hs, radius);
        let layer = &random_model(radius as u64, ModelConfig { channels: c, heads: 2, ..ModelConfig::default() })
            .params
            .encoder[0];
        let x = random_map(&mut rng, ws, hs, c);
        for mode in [MaskMode::Renormalize, MaskMode::Additive] {
            let opts = gde_core::fusion::model::AttentionOptions { heads: 2, mode };
            let weights = gde_core::fusion::model::self_attention_weights(&x, layer, &mask, opts).unwrap();
            assert_eq!(weights.len(), 2);
            for w in &weights {
                for i in 0..ws * hs {
                    let s: f64 = w.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    for j in 0..ws * hs {
                        let far = (i / ws).abs_diff(j / ws).max((i % ws).abs_diff(j % ws)) > radius;
                        if far {
                            assert_eq!(w.get(i, j), 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn zero_depth_queries_ignore_embedding_weight() {
    let (model, img, _, pe, mask) = golden_setup(MaskMode::Renormalize);
    let zeros = vec![0.0; img.len()];
    let mut other = model.clone();
    other.params.embed.weight.iter_mut().for_each(|w| *w *= -3.0);
    let a = model.forward(&img, &zeros, &pe, &mask).unwrap();
    let b = other.forward(&img, &zeros, &pe, &mask).unwrap();
    assert_eq!(a.output().matrix(), b.output().matrix());
}

#[test]
fn constant_memory_gives_constant_cross_update() {
    let (ws, hs, c) = (4, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let full = random_model(4, ModelConfig { channels: c, heads: 2, decoder_layers: 1, ..ModelConfig::default() });
    // only the cross-attention sublayer is active, and it carries encoder values only
    let mut layer = DecoderLayerWeights::zeros(c);
    layer.cross = full.params.decoder[0].cross.clone();
    layer.cross.wv_dec = Mat::zeros(c, c);
    let row: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let memory = FeatureMap::new(ws, hs, Mat::from_fn(ws * hs, c, |_, ch| row[ch])).unwrap();
    let depth: Vec<f64> = (0..ws * hs).map(|_| rng.gen_range(0.0..1.0)).collect();
    let map = GroundDepthMap::from_values(ws, hs, depth.clone(), depth.clone()).unwrap();
    let pe = PositionEncoding::sinusoidal(ws, hs, c).unwrap();
    let embed = full.params.embed.clone();
    let mask = AttentionMask::full(ws * hs);
    let opts = full.config.attention_options();
    let out = decode(&map, &memory, &pe, &[layer], &embed, &mask, opts).unwrap();
    let update: Grid = (0..ws * hs)
        .map(|i| (0..c).map(|ch| out.matrix().get(i, ch) - (depth[i] * embed.weight[ch] + embed.bias[ch] + pe.matrix().get(i, ch))).collect())
        .collect();
    for u in &update {
        for ch in 0..c {
            assert!((u[ch] - update[0][ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn decode_rejects_mismatched_depth_map() {
    let (model, img, _, pe, mask) = golden_setup(MaskMode::Renormalize);
    let opts = model.config.attention_options();
    let enc = encode(&img, &pe, &model.params.encoder, &mask, opts).unwrap();
    let map = GroundDepthMap::<f64>::zeros(7, 8);
    assert!(decode(&map, &enc, &pe, &model.params.decoder, &model.params.embed, &mask, opts).is_err());
}

#[test]
fn checkpoint_round_trip_and_layout() {
    let config = ModelConfig { channels: 4, heads: 2, window_radius: 3, mask_mode: MaskMode::Additive, ..ModelConfig::default() };
    let model = random_model(31, config);
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();

    // independent parse of the container
    assert_eq!(&bytes[..8], MAGIC);
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    assert_eq!(header["version"], 1);
    assert_eq!(header["channels"], 4);
    assert_eq!(header["heads"], 2);
    assert_eq!(header["window_radius"], 3);
    assert_eq!(header["mask_mode"], "additive");
    assert_eq!(header["norm_placement"], "pre");
    assert_eq!(header["dtype"], "f64le");
    let tensors = header["tensors"].as_array().unwrap();
    let names: Vec<&str> = tensors.iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names, model.params.tensor_names());
    assert_eq!(names[0], "encoder.0.norm_attn.gamma");
    assert_eq!(*names.last().unwrap(), "head.bias");
    let total: u64 = tensors.iter().map(|t| t["len"].as_u64().unwrap()).sum();
    assert_eq!(bytes.len(), 16 + len + 8 * total as usize);
    let first = f64::from_le_bytes(bytes[16 + len..24 + len].try_into().unwrap());
    assert_eq!(first, model.params.encoder[0].norm_attn.gamma[0]);
    let last = f64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    assert_eq!(last, model.params.head.bias[0]);

    let back: FusionModel<f64> = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back, model);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f64, _>(&bad[..]).is_err());
    assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn checkpoint_loads_as_f32() {
    let model = random_model(1, ModelConfig { channels: 2, heads: 1, ..ModelConfig::default() });
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let back: FusionModel<f32> = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back.params.head.bias[0], model.params.head.bias[0] as f32);
}
