use super::checkpoint;
use super::*;
use crate::config::Toggles;
use crate::gradcheck::{check_params, GradCheck};
use crate::phantom::gen_subjects;

fn tiny(toggles: Toggles) -> RunConfig {
    let mut c = RunConfig::from_json(
        r#"{
        "data": {"phantom": {"grid_size": 16}},
        "model": {"net": {"gen_channels": [4, 4, 4, 4], "disc_channels": [4, 4, 4, 4, 4],
                          "blocks_per_level": 1, "norm_groups": 2, "temb_sin_dim": 8,
                          "temb_dim": 8, "text_concat_channels": 2},
                  "text_dim": 6, "rec_hidden": 8},
        "omta": {"d_k": 4, "max_iters": 8, "eps": 0.1},
        "training": {"batch_size": 3, "epochs": 2}
    }"#,
    )
    .unwrap();
    c.training.toggles = toggles;
    c.validate().unwrap();
    c
}

fn full() -> Toggles {
    Toggles::default()
}

fn samples(cfg: &RunConfig, n: usize, seed: u64) -> Vec<Sample> {
    let subs = gen_subjects(seed, n, &cfg.data.phantom).unwrap();
    let refs: Vec<&Subject> = subs.iter().collect();
    let m = Model::new(cfg).unwrap();
    prepare_samples(&refs, &m.vocab).unwrap()
}

#[test]
fn loss_closed_forms() {
    let (d, g) = adversarial_losses(0.5, 0.5).unwrap();
    assert!((d - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((g - 2f64.ln()).abs() < 1e-15);
    let (d, _) = adversarial_losses(1.0, 0.0).unwrap();
    assert!(d < 1e-6);
    assert!(adversarial_losses(1.2, 0.5).is_err());
    assert!(adversarial_losses(0.5, -0.1).is_err());
    assert_eq!(total_generator_loss(0.3, 0.02, 0.5, 100.0, 10.0), 0.3 + 100.0 * 0.02 + 10.0 * 0.5);
    assert_eq!(total_generator_loss(0.0, 0.0, 0.0, 100.0, 10.0), 0.0);

    let a = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.1);
    assert_eq!(image_loss(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v + 0.5);
    assert!((image_loss(&a, &b).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn tape_losses_match_scalar_forms() {
    let real = [0.9, 0.2, 0.55];
    let fake = [0.1, 0.7, 0.35];
    let mut g = Graph::new();
    let r = g.input(Tensor::new(&[3, 1], real.to_vec()));
    let f = g.input(Tensor::new(&[3, 1], fake.to_vec()));
    let dl = d_loss_var(&mut g, r, f);
    let gl = g_adv_var(&mut g, f);
    let (mut de, mut ge) = (0.0, 0.0);
    for k in 0..3 {
        let (d, g) = adversarial_losses(real[k], fake[k]).unwrap();
        de += d / 3.0;
        ge += g / 3.0;
    }
    assert!((g.value(dl).item() - de).abs() < 1e-12);
    assert!((g.value(gl).item() - ge).abs() < 1e-12);
}

#[test]
fn toggles_control_parameter_groups() {
    let cases = [
        (Toggles { adv: false, text: false, ca: false, omta: false, rec: false }, vec![]),
        (Toggles { adv: true, text: false, ca: false, omta: false, rec: false }, vec!["disc"]),
        (Toggles { adv: true, text: true, ca: false, omta: false, rec: false }, vec!["disc", "text", "tab"]),
        (Toggles { adv: true, text: true, ca: true, omta: false, rec: false }, vec!["disc", "text", "ca"]),
        (Toggles { adv: true, text: true, ca: false, omta: true, rec: false }, vec!["disc", "text", "omta"]),
        (full(), vec!["disc", "text", "omta", "rec"]),
    ];
    for (tg, present) in cases {
        let m = Model::new(&tiny(tg)).unwrap();
        for group in ["disc", "text", "tab", "ca", "omta", "rec"] {
            let has = !m.store.group(group).is_empty();
            assert_eq!(has, present.contains(&group), "{tg:?} group {group}");
        }
        assert!(!m.store.group("gen").is_empty());
        assert!(!m.store.group("branch").is_empty());
    }
}

#[test]
fn runs_are_deterministic_and_logs_recombine() {
    let cfg = tiny(full());
    let data = samples(&cfg, 6, 1);
    let run = || {
        let mut st = TrainState::new(&cfg).unwrap();
        let mut logs = Vec::new();
        train(&mut st, &data, &[], &mut |e| {
            if let Event::Step(l) = e {
                logs.push(l.clone());
            }
            Ok(())
        })
        .unwrap();
        (st, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(la.len(), 4);
    assert_eq!(a.model.store, b.model.store);
    let tc = &cfg.training;
    for l in &la {
        assert!(l.l_total.is_finite() && l.d_loss > 0.0 && l.l_text > 0.0);
        assert_eq!(l.l_total, total_generator_loss(l.g_adv, l.l_img, l.l_text, tc.lambda_img, tc.lambda_text));
    }
    assert_eq!(la[0].lr_g, tc.lr_g);
}

#[test]
fn null_objective_leaves_generator_unchanged() {
    let mut cfg = tiny(Toggles { adv: false, ..full() });
    cfg.training.lambda_img = 0.0;
    cfg.training.lambda_text = 0.0;
    let data = samples(&cfg, 3, 2);
    let mut st = TrainState::new(&cfg).unwrap();
    let before = st.model.store.clone();
    let batch: Vec<&Sample> = data.iter().collect();
    let log = train_step(&mut st, &batch, 10).unwrap();
    assert_eq!(log.l_total, 0.0);
    assert_eq!(st.model.store, before);
}

#[test]
fn rec_off_has_no_text_term() {
    let cfg = tiny(Toggles { rec: false, ..full() });
    let data = samples(&cfg, 3, 3);
    let mut st = TrainState::new(&cfg).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let log = train_step(&mut st, &batch, 10).unwrap();
    assert_eq!(log.l_text, 0.0);
    let mut cfg2 = cfg.clone();
    cfg2.training.lambda_text = 1e6;
    let mut st2 = TrainState::new(&cfg2).unwrap();
    let log2 = train_step(&mut st2, &batch, 10).unwrap();
    assert_eq!(log.l_total, log2.l_total);
    assert_eq!(st.model.store, st2.model.store);
}

#[test]
fn zero_epochs_keep_initial_state() {
    let mut cfg = tiny(full());
    cfg.training.epochs = 0;
    let data = samples(&cfg, 3, 4);
    let mut st = TrainState::new(&cfg).unwrap();
    let init = st.model.store.clone();
    train(&mut st, &data, &data, &mut |_| Ok(())).unwrap();
    assert_eq!(st.model.store, init);
    assert_eq!((st.step, st.epoch), (0, 0));
}

#[test]
fn checkpoint_roundtrip_and_resume() {
    let cfg = tiny(full());
    let data = samples(&cfg, 5, 5);
    let mut straight = TrainState::new(&cfg).unwrap();
    train(&mut straight, &data, &[], &mut |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e1.ckpt");
    let mut first = TrainState::new(&cfg).unwrap();
    train(&mut first, &data, &[], &mut |e| {
        if let Event::EpochEnd(s) = e {
            if s.epoch == 1 {
                checkpoint::save(&path, s)?;
            }
        }
        Ok(())
    })
    .unwrap();
    let mut resumed = checkpoint::load(&path).unwrap();
    assert_eq!(resumed.epoch, 1);
    train(&mut resumed, &data, &[], &mut |_| Ok(())).unwrap();
    assert_eq!(resumed.model.store, straight.model.store);
    assert_eq!(resumed.opt_g, straight.opt_g);
    assert_eq!(resumed.opt_d, straight.opt_d);
    assert_eq!(resumed.step, straight.step);

    let bytes = checkpoint::to_bytes(&straight);
    let back = checkpoint::from_bytes(&path, &bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&back), bytes);
    assert!(checkpoint::from_bytes(&path, &bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&path, &bad), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_omits_disabled_modules() {
    let cfg = tiny(Toggles { adv: true, text: false, ca: false, omta: false, rec: false });
    let st = TrainState::new(&cfg).unwrap();
    let (meta, arrays) = checkpoint::parse(Path::new("x"), &checkpoint::to_bytes(&st)).unwrap();
    assert_eq!(meta.arrays.len(), arrays.len());
    for name in arrays.keys() {
        for g in ["text.", "omta.", "ca.", "rec.", "tab."] {
            assert!(!name.contains(&format!("/{g}")), "{name}");
        }
    }
}

use std::path::Path;

#[test]
fn generator_objective_gradcheck() {
    let cfg = tiny(full());
    let data = samples(&cfg, 2, 6);
    let model = Model::new(&cfg).unwrap();
    assert!(model.store.num_scalars() <= 10_000, "{}", model.store.num_scalars());
    let batch: Vec<&Sample> = data.iter().collect();
    let d = draw_step(&model.schedule, &batch, &mut stream_rng(0, 7)).unwrap();
    let ids = model.gen_ids();
    let rep = check_params(
        &model.store,
        &ids,
        |g, s| {
            let pass = gen_pass(&model, s, g, &batch, &d).unwrap();
            gen_objective(&model, s, g, &batch, &d, &pass).unwrap().total
        },
        GradCheck { coords_per_tensor: 2, ..GradCheck::default() },
    );
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn discriminator_loss_gradcheck() {
    let cfg = tiny(full());
    let data = samples(&cfg, 2, 8);
    let model = Model::new(&cfg).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let d = draw_step(&model.schedule, &batch, &mut stream_rng(0, 9)).unwrap();
    let disc = model.disc.as_ref().unwrap();
    let fake = d.y_t.map(|v| 0.5 * v);
    let rep = check_params(
        &model.store,
        &model.disc_ids(),
        |g, s| {
            let (rp, rt, fp) = (g.input(d.y_prev.clone()), g.input(d.y_t.clone()), g.input(fake.clone()));
            let dr = disc.forward(g, s, rp, rt, &d.ts).unwrap();
            let df = disc.forward(g, s, fp, rt, &d.ts).unwrap();
            d_loss_var(g, dr, df)
        },
        GradCheck { coords_per_tensor: 3, ..GradCheck::default() },
    );
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn r1_surrogate_matches_penalty_gradient() {
    let cfg = tiny(full());
    let data = samples(&cfg, 2, 10);
    let model = Model::new(&cfg).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let d = draw_step(&model.schedule, &batch, &mut stream_rng(0, 11)).unwrap();
    let disc = model.disc.as_ref().unwrap();
    let gamma = 2.0;
    let penalty = |store: &ParamStore| {
        let mut g = Graph::new();
        r1_surrogate(&mut g, disc, store, &d.y_prev, &d.y_t, &d.ts, gamma)
            .unwrap()
            .unwrap()
            .1
    };
    let mut g = Graph::new();
    let (term, _) = r1_surrogate(&mut g, disc, &model.store, &d.y_prev, &d.y_t, &d.ts, gamma)
        .unwrap()
        .unwrap();
    let grads = g.backward(term);
    let mut worst: f64 = 0.0;
    for name in ["disc.out.w", "disc.l4.b0.c2.w", "disc.in.w"] {
        let id = model.store.id(name).unwrap_or_else(|| panic!("{name}"));
        let an = grads.param(id).unwrap();
        for k in 0..3 {
            let h = 1e-5;
            let mut sp = model.store.clone();
            sp.get_mut(id).data_mut()[k] += h;
            let mut sm = model.store.clone();
            sm.get_mut(id).data_mut()[k] -= h;
            let num = (penalty(&sp) - penalty(&sm)) / (2.0 * h);
            let a = an.data()[k];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn small_step_descends() {
    let mut cfg = tiny(Toggles { adv: false, ..full() });
    cfg.training.lr_g = 1e-5;
    let mut decreased = 0;
    let mut mean_delta = 0.0;
    for seed in 0..20u64 {
        cfg.seeds.master = seed;
        let data = samples(&cfg, 3, 100 + seed);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut st = TrainState::new(&cfg).unwrap();
        let before = generator_loss(&st.model, &batch, 0).unwrap();
        train_step(&mut st, &batch, 1000).unwrap();
        let after = generator_loss(&st.model, &batch, 0).unwrap();
        mean_delta += (after - before) / 20.0;
        if after < before {
            decreased += 1;
        }
    }
    assert!(mean_delta < 0.0 && decreased >= 15, "{decreased} {mean_delta}");
}

#[test]
fn ddpm_mode_trains_without_discriminator() {
    let mut cfg = tiny(Toggles { adv: false, text: false, ca: false, omta: false, rec: false });
    cfg.training.mode = TrainMode::Ddpm;
    cfg.schedule = crate::config::ScheduleConfig {
        kind: crate::schedule::ScheduleKind::Linear,
        steps: 8,
        beta_min: 1e-4,
        beta_max: 0.2,
    };
    let data = samples(&cfg, 4, 12);
    let mut st = TrainState::new(&cfg).unwrap();
    assert!(st.opt_d.is_none());
    let mut logs = Vec::new();
    train(&mut st, &data, &data[..2], &mut |e| {
        match e {
            Event::Step(l) => logs.push(l.clone()),
            Event::Validation(v) => assert!(v.psnr.is_finite()),
            Event::EpochEnd(_) => {}
        }
        Ok(())
    })
    .unwrap();
    assert!(logs.iter().all(|l| l.d_loss == 0.0 && l.l_img > 0.0));
}

#[test]
fn sampling_is_deterministic_and_bounded() {
    let cfg = tiny(full());
    let data = samples(&cfg, 3, 13);
    let m = Model::new(&cfg).unwrap();
    let (a, za) = crate::sampler::sample_samples(&m, &data, 5, false).unwrap();
    let (b, zb) = crate::sampler::sample_samples(&m, &data, 5, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(za, zb);
    assert_eq!(za[0].len(), cfg.model.net.gen_channels[0]);
    for img in &a {
        assert_eq!(img.shape(), &[1, 16, 16]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn conditioning_is_step_independent() {
    let cfg = tiny(full());
    let data = samples(&cfg, 2, 14);
    let m = Model::new(&cfg).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let tokens: Vec<Vec<usize>> = data.iter().map(|s| s.prompt.tokens.clone()).collect();
    let mut first = None;
    for _ in 0..cfg.schedule.steps {
        let mut g = Graph::new();
        let x = g.input(stack_field(&batch, |s| &s.x_l));
        let (c, _, _) = m.condition(&mut g, x, &tokens).unwrap();
        let vals: Vec<Tensor> = c.iter().map(|&v| g.value(v).clone()).collect();
        match &first {
            None => first = Some(vals),
            Some(f) => assert_eq!(f, &vals),
        }
    }
}
