use super::*;
use crate::datagen::generate_tile;
use crate::geometry::{default_band_registry, pixels_for, FootprintSample, GroupImage};
use crate::posenc::build_alibi_bias;
use crate::sampler::GroupPatch;

fn plan_of(cover: f64, spec: &[(u32, f64, usize)]) -> PatchPlan {
    let groups: Vec<GroupPatch> = spec
        .iter()
        .map(|&(group_id, gsd_m, p)| {
            let h = pixels_for(cover, gsd_m);
            GroupPatch { group_id, gsd_m, h, w: h, patch_px: p, token_count: h.div_ceil(p).pow(2) }
        })
        .collect();
    let total_tokens = groups.iter().map(|g| g.token_count).sum();
    PatchPlan { ground_cover_m: cover, groups, total_tokens }
}

fn sample_of(cover: f64, seed: u64) -> FootprintSample {
    let t = generate_tile(seed, cover).unwrap();
    FootprintSample::new(cover, t.groups).unwrap()
}

fn micro() -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig::micro();
    let p = ParamStore::init(&cfg, &default_band_registry(), 3).unwrap();
    (cfg, p)
}

fn close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max diff {d} > {tol}");
}

#[test]
fn shape_law_over_patch_sizes() {
    let (cfg, params) = micro();
    let sample = sample_of(960.0, 1);
    for p in [4, 6, 8, 16, 32] {
        let g = Graph::new();
        let b = params.bind(&g);
        let plan = plan_of(960.0, &[(1, 10.0, p)]);
        let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
        let n = 96usize.div_ceil(p).pow(2);
        assert_eq!(seq.len(), n);
        assert_eq!(g.shape(seq.tokens), vec![n, cfg.embed_dim]);
        assert!(seq.provenance.iter().all(|r| r.group_id == 1 && r.bands == 4));
    }
}

#[test]
fn canonical_patch_uses_weights_directly() {
    let cfg = ModelConfig { canonical_patch: 8, ..ModelConfig::micro() };
    let reg = default_band_registry();
    let mut params = ParamStore::init(&cfg, &reg, 9).unwrap();
    params.get_mut(&embed_bias_name(3)).unwrap().data_mut()[0] = 0.25;
    let sample = sample_of(960.0, 2);
    let plan = plan_of(960.0, &[(3, 60.0, 8)]);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();

    let patches = patchify(&sample.group(3).unwrap().image, 8).unwrap();
    let bias = params.get(&embed_bias_name(3)).unwrap();
    let mut want = Tensor::zeros(&[4, cfg.embed_dim]);
    for (band, x) in patches.iter().enumerate() {
        let w = params.get(&embed_weight_name(3, band)).unwrap();
        want.add_assign(&x.matmul(&w.transpose()).unwrap());
    }
    let want = Tensor::from_fn(4, cfg.embed_dim, |i, j| want.at(i, j) / 2.0 + bias.at(0, j));
    close(&g.value(seq.tokens), &want, 1e-12);
}

#[test]
fn opposite_bands_cancel_and_single_band_is_identity() {
    let (cfg, mut params) = micro();
    let w0 = params.get(&embed_weight_name(3, 0)).unwrap().clone();
    *params.get_mut(&embed_weight_name(3, 1)).unwrap() = w0.scale(-1.0);
    let img = sample_of(960.0, 4).group(3).unwrap().image.clone();
    // Same pixels in both bands.
    let dup = Tensor::new(
        vec![16, 16, 2],
        img.data().chunks(2).flat_map(|c| [c[0], c[0]]).collect(),
    )
    .unwrap();
    let sample = FootprintSample::new(960.0, vec![GroupImage { group_id: 3, gsd_m: 60.0, image: dup }]).unwrap();
    let plan = plan_of(960.0, &[(3, 60.0, 8)]);
    let g = Graph::new();
    let seq = embed_bands(&g, &params.bind(&g), &cfg, &sample, &plan).unwrap();
    assert!(g.value(seq.tokens).data().iter().all(|&v| v.abs() < 1e-15));

    let reg = crate::geometry::BandRegistry::new(vec![crate::geometry::BandGroup::new(
        3,
        "S2",
        &["only"],
        60.0,
        crate::geometry::SensorKind::Reflectance,
    )
    .unwrap()])
    .unwrap();
    let single = ParamStore::init(&cfg, &reg, 1).unwrap();
    let one = Tensor::new(vec![16, 16, 1], img.data().iter().step_by(2).copied().collect()).unwrap();
    let sample = FootprintSample::new(960.0, vec![GroupImage { group_id: 3, gsd_m: 60.0, image: one.clone() }]).unwrap();
    let g = Graph::new();
    let b = single.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
    let rplan = ResizePlan::cached(cfg.canonical_patch, 8).unwrap();
    let w = crate::numerics::pi_resize_embed_weights(single.get(&embed_weight_name(3, 0)).unwrap(), &rplan).unwrap();
    let want = patchify(&one, 8).unwrap()[0].matmul(&w.transpose()).unwrap();
    close(&g.value(seq.tokens), &want, 1e-12);
}

#[test]
fn missing_band_weights_error() {
    let (cfg, mut params) = micro();
    params.tensors.remove(&embed_weight_name(1, 2));
    let g = Graph::new();
    let err = embed_bands(&g, &params.bind(&g), &cfg, &sample_of(960.0, 1), &plan_of(960.0, &[(1, 10.0, 16)]));
    assert!(matches!(err, Err(Error::MissingWeights(_))));
}

fn encode_fixture(cfg: &ModelConfig, params: &ParamStore, sample: &FootprintSample, plan: &PatchPlan, mask: &MaskPlan) -> Tensor {
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, cfg, sample, plan).unwrap().with_mask(mask).unwrap();
    let bias = plan_bias(cfg, plan).unwrap();
    let out = encode(&g, &b, cfg, &seq, &bias).unwrap();
    let v = g.value(out.tokens).clone();
    v
}

#[test]
fn zero_layers_is_identity() {
    let cfg = ModelConfig { layers: 0, ..ModelConfig::micro() };
    let params = ParamStore::init(&cfg, &default_band_registry(), 3).unwrap();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let sample = sample_of(960.0, 5);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
    let out = encode(&g, &b, &cfg, &seq, &plan_bias(&cfg, &plan).unwrap()).unwrap();
    assert_eq!(*g.value(out.tokens), *g.value(seq.tokens));
}

fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let c = x.cols();
    Tensor::from_fn(x.rows(), c, |i, j| {
        let r = x.row(i);
        let mu = r.iter().sum::<f64>() / c as f64;
        let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
        (r[j] - mu) / (var + layers::LN_EPS).sqrt() * gain.at(0, j) + bias.at(0, j)
    })
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let y = x.matmul(w).unwrap();
    Tensor::from_fn(y.rows(), y.cols(), |i, j| y.at(i, j) + b.at(0, j))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn single_token_attention_passes_values_through() {
    let (cfg, params) = micro();
    let plan = plan_of(960.0, &[(10, 960.0, 4)]);
    let sample = sample_of(960.0, 6);
    assert_eq!(plan.total_tokens, 1);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
    let x0 = g.value(seq.tokens).clone();
    let out = encode(&g, &b, &cfg, &seq, &plan_bias(&cfg, &plan).unwrap()).unwrap();

    let t = |n: &str| params.get(n).unwrap().clone();
    let e = cfg.embed_dim;
    let h = layer_norm_rows(&x0, &t("enc.0.ln1.g"), &t("enc.0.ln1.b"));
    let qkv = affine(&h, &t("enc.0.attn.qkv.w"), &t("enc.0.attn.qkv.b"));
    let v = Tensor::from_fn(1, e, |_, j| qkv.at(0, 2 * e + j));
    let a = affine(&v, &t("enc.0.attn.out.w"), &t("enc.0.attn.out.b"));
    let x1 = x0.zip_map(&a, |p, q| p + q).unwrap();
    let h2 = layer_norm_rows(&x1, &t("enc.0.ln2.g"), &t("enc.0.ln2.b"));
    let m = affine(&h2, &t("enc.0.mlp.fc1.w"), &t("enc.0.mlp.fc1.b")).map(gelu);
    let m = affine(&m, &t("enc.0.mlp.fc2.w"), &t("enc.0.mlp.fc2.b"));
    let x2 = x1.zip_map(&m, |p, q| p + q).unwrap();
    let want = layer_norm_rows(&x2, &t("enc.norm.g"), &t("enc.norm.b"));
    close(&g.value(out.tokens), &want, 1e-12);
}

#[test]
fn encoder_is_permutation_equivariant() {
    let (cfg, params) = micro();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let sample = sample_of(960.0, 7);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
    let bias = plan_bias(&cfg, &plan).unwrap();
    let out = encode(&g, &b, &cfg, &seq, &bias).unwrap();

    let n = seq.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let shuffled = TokenSequence {
        tokens: g.gather_rows(seq.tokens, &perm).unwrap(),
        provenance: perm.iter().map(|&i| seq.provenance[i]).collect(),
        masked: vec![false; n],
    };
    let out_p = encode(&g, &b, &cfg, &shuffled, &bias.permute(&perm)).unwrap();
    let want = g.value(g.gather_rows(out.tokens, &perm).unwrap()).clone();
    close(&g.value(out_p.tokens), &want, 1e-12);
}

#[test]
fn masked_pixels_do_not_reach_the_encoder() {
    let (cfg, params) = micro();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let sample = sample_of(960.0, 8);
    let mask = MaskPlan {
        ratio: 0.5,
        masks: vec![(0..16).map(|i| i % 3 == 0).collect(), vec![true, false, false, true]],
    };
    let base = encode_fixture(&cfg, &params, &sample, &plan, &mask);

    let mut changed = sample.clone();
    for gi in 0..2 {
        let gp = &plan.groups[gi];
        let img = &mut changed.groups.iter_mut().find(|x| x.group_id == gp.group_id).unwrap().image;
        let (w, c) = (img.shape()[1], img.shape()[2]);
        let cols = gp.grid_cols();
        for (t, &m) in mask.masks[gi].iter().enumerate() {
            if !m {
                continue;
            }
            let (r0, c0) = ((t / cols) * gp.patch_px, (t % cols) * gp.patch_px);
            for y in r0..r0 + gp.patch_px {
                for x in c0..c0 + gp.patch_px {
                    for ch in 0..c {
                        img.data_mut()[(y * w + x) * c + ch] += 5.0;
                    }
                }
            }
        }
    }
    assert_ne!(changed, sample);
    assert_eq!(encode_fixture(&cfg, &params, &changed, &plan, &mask), base);
}

fn decode_fixture(params: &ParamStore, mask: &MaskPlan, positions: Option<Tensor>) -> Tensor {
    let (cfg, _) = micro();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let sample = sample_of(960.0, 9);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap().with_mask(mask).unwrap();
    let enc = encode(&g, &b, &cfg, &seq, &plan_bias(&cfg, &plan).unwrap()).unwrap();
    let pos = positions.unwrap_or_else(|| decoder_positions(&cfg, &token_grids(&plan).unwrap()).unwrap());
    let z = decode(&g, &b, &cfg, &enc, &seq.masked, &pos).unwrap();
    let v = g.value(z).clone();
    v
}

#[test]
fn decoder_keeps_token_count_and_ignores_unused_mask_token() {
    let (_, params) = micro();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let none = MaskPlan::none(&plan);
    let z = decode_fixture(&params, &none, None);
    assert_eq!(z.shape(), &[plan.total_tokens, 8]);

    let mut other = params.clone();
    other.get_mut("dec.mask_token").unwrap().data_mut()[0] += 1.0;
    assert_eq!(decode_fixture(&other, &none, None), z);

    let half = MaskPlan { ratio: 0.5, masks: vec![(0..16).map(|i| i < 8).collect(), vec![false; 4]] };
    assert_ne!(decode_fixture(&other, &half, None), decode_fixture(&params, &half, None));
}

#[test]
fn colocated_masked_tokens_decode_identically() {
    let (cfg, params) = micro();
    let plan = plan_of(960.0, &[(1, 10.0, 24), (3, 60.0, 8)]);
    let mask = MaskPlan { ratio: 0.5, masks: vec![(0..16).map(|i| i == 2 || i == 5).collect(), vec![false; 4]] };
    let mut pos = decoder_positions(&cfg, &token_grids(&plan).unwrap()).unwrap();
    let shared = pos.row(2).to_vec();
    pos.data_mut()[5 * 8..6 * 8].copy_from_slice(&shared);
    let z = decode_fixture(&params, &mask, Some(pos));
    close(&Tensor::from_rows(&[z.row(2).to_vec()]).unwrap(), &Tensor::from_rows(&[z.row(5).to_vec()]).unwrap(), 1e-13);
    assert!(z.row(2) != z.row(3));
}

#[test]
fn projection_resize_matches_bilinear_of_canonical() {
    let g = Graph::new();
    let mut rng = crate::sampler::seeded(10);
    let rand = |r: usize, c: usize, rng: &mut crate::sampler::Rng64| {
        use rand::Rng;
        Tensor::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5)
    };
    let (d, ch, pc) = (5, 3, 4);
    let z = g.constant(rand(6, d, &mut rng));
    let v = g.constant(rand(ch * d, pc * pc, &mut rng));
    let b = g.constant(rand(ch, pc * pc, &mut rng));
    let canon = ResizePlan::cached(pc, pc).unwrap();
    let base = g.value(project_patches(&g, z, v, b, ch, &canon).unwrap()).clone();
    // Plain matmul oracle: channel c of token n is z_n · v_c + b_c.
    let (zt, vt, bt) = (g.value(z).clone(), g.value(v).clone(), g.value(b).clone());
    let want = Tensor::from_fn(6, ch * pc * pc, |n, col| {
        let (c, k) = (col / (pc * pc), col % (pc * pc));
        (0..d).map(|i| zt.at(n, i) * vt.at(c * d + i, k)).sum::<f64>() + bt.at(c, k)
    });
    close(&base, &want, 1e-13);

    for pt in [6, 8, 3] {
        let plan = ResizePlan::cached(pc, pt).unwrap();
        let out = g.value(project_patches(&g, z, v, b, ch, &plan).unwrap()).clone();
        for n in 0..6 {
            for c in 0..ch {
                let src = &base.row(n)[c * pc * pc..(c + 1) * pc * pc];
                let up = plan.apply(src).unwrap();
                let got = &out.row(n)[c * pt * pt..(c + 1) * pt * pt];
                for (a, e) in got.iter().zip(&up) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    let zero = g.constant(Tensor::zeros(&[2, d]));
    let zb = g.constant(Tensor::zeros(&[ch, pc * pc]));
    let plan = ResizePlan::cached(pc, 8).unwrap();
    let out = project_patches(&g, zero, v, zb, ch, &plan).unwrap();
    assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    assert!(project_patches(&g, z, v, b, ch + 1, &plan).is_err());
}

#[test]
fn image_heads_on_constant_tokens() {
    let (_, params) = micro();
    let g = Graph::new();
    let b = params.bind(&g);
    let c = 0.7;
    let seq = TokenSequence {
        tokens: g.constant(Tensor::full(&[5, 8], c)),
        provenance: vec![TokenRef { group_id: 1, index: 0, bands: 1 }; 5],
        masked: vec![false; 5],
    };
    let out = image_heads(&g, &b, &seq).unwrap();
    let w = params.get("img.w").unwrap();
    let bias = params.get("img.b").unwrap();
    let want = Tensor::from_fn(1, IMAGE_OUTPUTS, |_, j| c * (0..8).map(|i| w.at(i, j)).sum::<f64>() + bias.at(0, j));
    close(&g.value(out.all), &want, 1e-14);
    assert_eq!(ERA5_RANGE.len(), 17);
    assert_eq!(ORBIT_RANGE.len(), 2);
}

#[test]
fn encoder_accepts_four_times_the_training_tokens() {
    let (cfg, params) = micro();
    let cover = 1280.0;
    let plan = plan_of(cover, &[(1, 10.0, 4)]);
    assert_eq!(plan.total_tokens, 1024);
    let sample = sample_of(cover, 11);
    let g = Graph::new();
    let b = params.bind(&g);
    let seq = embed_bands(&g, &b, &cfg, &sample, &plan).unwrap();
    let bias = build_alibi_bias(&token_grids(&plan).unwrap(), cfg.heads).unwrap();
    let out = encode(&g, &b, &cfg, &seq, &bias).unwrap();
    assert!(g.value(out.tokens).is_finite());
}
