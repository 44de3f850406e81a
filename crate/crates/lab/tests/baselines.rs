mod common;

use metaens_core::arch::functional_forward;
use metaens_core::generator::WeightGenerator;
use metaens_core::weights::WeightSet;
use metaens_core::{rng, Error};
use metaens_lab::baselines::{
    ensemble_predict, mlp_param_shapes, scale_teachers, MlpConfig, ScaleMode,
};
use metaens_lab::config::desk_generator;
use metaens_lab::zoo::Teacher;

#[test]
fn ensemble_is_the_mean_of_teacher_logits_in_any_order() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = common::small_experiment(tmp.path());
    let ws: Vec<WeightSet<f32>> = exp.train_teachers.values().take(4).cloned().collect();
    let batch = exp.data.test.gather(&(0..40).collect::<Vec<_>>());
    let got = ensemble_predict(&ws, &batch).unwrap();
    let each: Vec<_> = ws
        .iter()
        .map(|w| functional_forward(w.arch(), w, &batch).unwrap())
        .collect();
    for (i, &g) in got.data().iter().enumerate() {
        let mean = each.iter().map(|l| l.data()[i] as f64).sum::<f64>() / ws.len() as f64;
        assert!(
            (g as f64 - mean).abs() <= 1e-5 * (1.0 + mean.abs()),
            "{i}: {g} vs {mean}"
        );
    }
    let mut rev = ws.clone();
    rev.reverse();
    rev.swap(0, 2);
    let again = ensemble_predict(&rev, &batch).unwrap();
    let bits =
        |t: &metaens_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&got), bits(&again));
    assert!(ensemble_predict::<f32>(&[], &batch).is_err());
}

#[test]
fn scaling_modes_call_counts_and_capacity() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = common::small_experiment(tmp.path());
    let teachers: Vec<Teacher<f32>> = exp
        .train_teachers
        .iter()
        .map(|(id, w)| Teacher {
            id: id.clone(),
            weights: w.clone(),
        })
        .collect();
    let mut pair_cfg = exp.config.generator.clone();
    pair_cfg.n_teachers = 2;
    let pair = exp.new_generator(&pair_cfg, 0).unwrap();
    let concat = exp.new_generator(&exp.config.generator, 0).unwrap();

    let h = scale_teachers(&pair, &teachers[..4], ScaleMode::Heuristic).unwrap();
    assert_eq!(h.generator_calls, 3);
    assert_eq!(h.reductions.len(), 3);
    assert!(h.reductions[2].ends_with("-> s3"));
    let c = scale_teachers(&concat, &teachers[..4], ScaleMode::Concatenate).unwrap();
    assert_eq!(c.generator_calls, 1);
    // past the model-id table
    let over = scale_teachers(&concat, &teachers[..5], ScaleMode::Concatenate);
    assert!(matches!(over, Err(Error::Capacity(_))));
    // a three-teacher generator cannot fold pairs
    assert!(scale_teachers(&concat, &teachers[..3], ScaleMode::Heuristic).is_err());
    assert!(scale_teachers(&pair, &teachers[..1], ScaleMode::Concatenate).is_err());

    // at m = 2 both modes are one call of the same generator
    let a = scale_teachers(&pair, &teachers[..2], ScaleMode::Heuristic).unwrap();
    let b = scale_teachers(&pair, &teachers[..2], ScaleMode::Concatenate).unwrap();
    assert_eq!(a.generator_calls, 1);
    assert_eq!(a.student, b.student);
    assert_eq!(
        "heuristic".parse::<ScaleMode>().unwrap(),
        ScaleMode::Heuristic
    );
    assert!("other".parse::<ScaleMode>().is_err());
}

#[test]
fn mlp_predictor_outgrows_the_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = common::small_experiment(tmp.path());
    assert!(exp.arch.layers.len() >= 4);
    let gen = exp.new_generator(&desk_generator(), 0).unwrap();
    let wf: usize = gen.params().values().map(|t| t.numel()).sum();
    let mlp: usize = mlp_param_shapes(&MlpConfig::default(), &exp.arch)
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum();
    assert!(mlp > wf, "mlp {mlp} vs generator {wf}");

    let cfg = MlpConfig {
        hidden_cap: 8,
        ..MlpConfig::default()
    };
    let m = metaens_lab::baselines::MlpPredictor::new(
        cfg,
        exp.arch.clone(),
        exp.norm.clone(),
        &mut rng::stream(0, "m"),
    )
    .unwrap();
    let ws: Vec<WeightSet<f32>> = exp.train_teachers.values().take(3).cloned().collect();
    let (student, _) = m
        .generate_student(&ws, metaens_core::generator::Mode::Eval)
        .unwrap();
    assert_eq!(student.arch(), ws[0].arch());
}
