use super::*;
use crate::fixtures::{synth_fixture, SynthData, SynthSpec};
use crate::numerics::{gelu, softmax_rows};

fn tiny_data() -> SynthData {
    synth_fixture(&SynthSpec {
        seed: 5,
        n_attributes: 6,
        n_super_classes: 3,
        n_objects: 2,
        dims: FixtureDims {
            d_q: 6,
            d_v: 5,
            h: 2,
            w: 3,
            n_z: 4,
        },
        n_train: 3,
        n_eval: 1,
        n_novel: 1,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        d_ff: 6,
        blocks: 2,
        ..ModelConfig::default()
    }
}

fn input<'a>(data: &'a SynthData, k: usize) -> InstanceInput<'a> {
    let inst = &data.train[k];
    InstanceInput {
        arrays: data.fixture.instance(&inst.instance_id).unwrap(),
        mask: &inst.mask,
        object_index: data.hierarchy.object_index(&inst.object).unwrap(),
    }
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
        }
    }
    out
}

/// Sequential re-derivation of the forward pass with plain tensor ops.
fn oracle(model: &Model, data: &SynthData, inp: &InstanceInput) -> (Vec<Vec<f64>>, Vec<f64>) {
    let s = &model.params.store;
    let w = |id| &s.get(id).value;
    let fx = &data.fixture;
    let text = fx.attr_text_emb.matmul_t(w(model.params.text_proj)).unwrap();
    let v = pool_qformer(
        &inp.arrays.z_hat,
        fx.obj_text_emb.row(inp.object_index),
        &fx.attr_text_emb,
        model.config.pool_mode,
    )
    .unwrap();
    let mut per_ctx = Vec::new();
    for cp in &model.params.contexts {
        let f = match cp.context {
            Context::Img => inp.arrays.f_img.clone(),
            Context::Crop => inp.arrays.f_crop.clone(),
            Context::Mask => mask_feature_map(&inp.arrays.f_crop, inp.mask, fx.dims.h, fx.dims.w).unwrap(),
        };
        let ft = f.matmul_t(w(cp.feat_proj)).unwrap();
        let mut q = Tensor::zeros(&[fx.n_super_classes(), model.config.d]);
        for j in 0..fx.n_super_classes() {
            let mut cat = fx.super_text_emb.row(j).to_vec();
            cat.extend(&v);
            let p = w(cp.query_proj);
            for r in 0..model.config.d {
                q.row_mut(j)[r] = (0..cat.len()).map(|c| p.get2(r, c) * cat[c]).sum();
            }
        }
        for b in &cp.blocks {
            let qq = q.matmul_t(w(b.w_q)).unwrap();
            let kk = ft.matmul_t(w(b.w_k)).unwrap();
            let vv = ft.matmul_t(w(b.w_v)).unwrap();
            let scores = qq.matmul_t(&kk).unwrap().map(|x| x / (model.config.d as f64).sqrt());
            let a = softmax_rows(&scores).unwrap().matmul(&vv).unwrap();
            let mut r = q.clone();
            r.add_assign(&a.matmul_t(w(b.w_o)).unwrap());
            q = layer_norm(&r, w(b.ln1_gain), w(b.ln1_bias));
            let h = q.matmul_t(w(b.ffn_in)).unwrap().map(gelu).matmul_t(w(b.ffn_out)).unwrap();
            let mut r = q.clone();
            r.add_assign(&h);
            q = layer_norm(&r, w(b.ln2_gain), w(b.ln2_bias));
        }
        let delta = data.hierarchy.delta();
        per_ctx.push(
            (0..fx.n_attributes())
                .map(|i| text.row(i).iter().zip(q.row(delta[i])).map(|(a, b)| a * b).sum())
                .collect::<Vec<f64>>(),
        );
    }
    let n = per_ctx.len() as f64;
    let c_bar = (0..fx.n_attributes())
        .map(|i| per_ctx.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    (per_ctx, c_bar)
}

#[test]
fn forward_matches_sequential_oracle() {
    let data = tiny_data();
    let model = Model::new(tiny_config(), data.fixture.dims, 11).unwrap();
    for k in 0..data.train.len() {
        let inp = input(&data, k);
        let out = model.infer(&data.fixture, data.hierarchy.delta(), &inp).unwrap();
        let (per_ctx, c_bar) = oracle(&model, &data, &inp);
        for (got, want) in out.logits.iter().zip(&per_ctx) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        for (a, b) in out.c_bar.iter().zip(&c_bar) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn q_bar_is_mean_of_context_queries() {
    let data = tiny_data();
    let model = Model::new(tiny_config(), data.fixture.dims, 1).unwrap();
    let out = model.infer(&data.fixture, data.hierarchy.delta(), &input(&data, 0)).unwrap();
    assert_eq!(out.q_hat.len(), 3);
    for (k, &qb) in out.q_bar.data().iter().enumerate() {
        let m = out.q_hat.iter().map(|q| q.data()[k]).sum::<f64>() / 3.0;
        assert!((qb - m).abs() < 1e-14);
    }
}

#[test]
fn attributes_in_one_super_class_share_query() {
    let data = tiny_data();
    let model = Model::new(tiny_config(), data.fixture.dims, 2).unwrap();
    let delta = data.hierarchy.delta();
    let inp = input(&data, 1);
    let out = model.infer(&data.fixture, delta, &inp).unwrap();
    let text = data
        .fixture
        .attr_text_emb
        .matmul_t(&model.params.store.get(model.params.text_proj).value)
        .unwrap();
    for (c, q) in out.logits.iter().zip(&out.q_hat) {
        for i in 0..delta.len() {
            let want: f64 = text.row(i).iter().zip(q.row(delta[i])).map(|(a, b)| a * b).sum();
            assert!((c[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn orthogonal_text_gives_zero_logits() {
    let data = tiny_data();
    let mut model = Model::new(tiny_config(), data.fixture.dims, 3).unwrap();
    let id = model.params.text_proj;
    model.params.store.get_mut(id).value.fill(0.0);
    let out = model.infer(&data.fixture, data.hierarchy.delta(), &input(&data, 0)).unwrap();
    assert!(out.c_bar.iter().all(|&c| c == 0.0));
    assert_eq!(crate::numerics::sigmoid(out.c_bar[0]), 0.5);
}

#[test]
fn query_allocation_follows_mode() {
    let data = tiny_data();
    let inp = input(&data, 0);
    for (mode, rows) in [(QueryMode::Superclass, 3), (QueryMode::Classwise, 6)] {
        let cfg = ModelConfig {
            query_mode: mode,
            ..tiny_config()
        };
        let model = Model::new(cfg, data.fixture.dims, 4).unwrap();
        for k in 0..3 {
            assert_eq!(model.initial_queries(k, &data.fixture, &inp).unwrap().rows(), rows);
        }
        let out = model.infer(&data.fixture, data.hierarchy.delta(), &inp).unwrap();
        assert_eq!(out.q_hat[0].rows(), rows);
        assert_eq!(mode.rows(6, 3), rows);
    }
}

#[test]
fn toggles_change_structure() {
    let data = tiny_data();
    let crop_only = Model::new(
        ModelConfig {
            md: false,
            ..tiny_config()
        },
        data.fixture.dims,
        0,
    )
    .unwrap();
    assert_eq!(crop_only.contexts(), vec![Context::Crop]);
    let out = crop_only.infer(&data.fixture, data.hierarchy.delta(), &input(&data, 0)).unwrap();
    assert_eq!(out.logits.len(), 1);
    assert_eq!(out.c_bar, out.logits[0]);

    let no_sqi = Model::new(
        ModelConfig {
            sqi: false,
            ..tiny_config()
        },
        data.fixture.dims,
        0,
    )
    .unwrap();
    // without the visual vector the queries are identical across instances
    let a = no_sqi.initial_queries(0, &data.fixture, &input(&data, 0)).unwrap();
    let b = no_sqi.initial_queries(0, &data.fixture, &input(&data, 1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn positional_encoding_and_heads_run() {
    let data = tiny_data();
    let cfg = ModelConfig {
        positional_encoding: true,
        heads: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg, data.fixture.dims, 9).unwrap();
    let out = model.infer(&data.fixture, data.hierarchy.delta(), &input(&data, 0)).unwrap();
    assert!(out.c_bar.iter().all(|c| c.is_finite()));
    let pe = positional_encoding(3, 4);
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!(ModelConfig { heads: 3, ..tiny_config() }.validate().is_err());
}

#[test]
fn bad_delta_is_rejected() {
    let data = tiny_data();
    let model = Model::new(tiny_config(), data.fixture.dims, 0).unwrap();
    assert!(model.infer(&data.fixture, &[0, 1], &input(&data, 0)).is_err());
    assert!(model.infer(&data.fixture, &[9; 6], &input(&data, 0)).is_err());
}
