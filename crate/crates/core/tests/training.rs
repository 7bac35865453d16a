use biqa_core::burstgen::{synthesize_indexed, GeneratorConfig};
use biqa_core::downstream::{annotate_leave_one_out, run_teacher, QualityAnnotation, TeacherModel};
use biqa_core::model::{Example, Model, ModelConfig, Trainer};
use biqa_core::numerics::{AdamConfig, Tensor};
use biqa_core::objectives::LossConfig;

type Data = Vec<(Tensor<f32>, QualityAnnotation, Tensor<f32>)>;

fn data(n: u64) -> Data {
    let cfg = GeneratorConfig {
        frames: 4,
        height: 32,
        width: 32,
        planted_outlier_prob: 1.0,
        ..GeneratorConfig::default()
    };
    let teacher = TeacherModel::denoise();
    (0..n)
        .map(|i| {
            let (seq, gt) = synthesize_indexed(&cfg, i).unwrap();
            let ann = annotate_leave_one_out(&teacher, &seq, &gt, 0.02).unwrap();
            let feats = run_teacher(&teacher, &seq).unwrap().features;
            (seq.frames, ann, feats)
        })
        .collect()
}

fn epoch(trainer: &mut Trainer<f32>, data: &Data) -> Vec<(f64, f64)> {
    data.iter()
        .map(|(frames, ann, feats)| {
            let v = trainer
                .step(&Example {
                    frames,
                    ref_index: 0,
                    teacher: Some(feats),
                    scores: &ann.scores,
                    groups: &ann.groups,
                })
                .unwrap();
            (v.l_dist, v.l_mrg)
        })
        .collect()
}

#[test]
fn zero_objective_leaves_parameters_unchanged() {
    let d = data(3);
    let model = Model::init(&ModelConfig::default(), 1);
    let loss = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        ..LossConfig::default()
    };
    let mut trainer = Trainer::new(model.clone(), AdamConfig::default(), loss);
    epoch(&mut trainer, &d);
    assert_eq!(trainer.model, model);
}

#[test]
fn training_is_deterministic() {
    let d = data(3);
    let run = || {
        let mut t = Trainer::new(Model::init(&ModelConfig::default(), 2), AdamConfig::default(), LossConfig::default());
        let log: Vec<_> = (0..2).flat_map(|_| epoch(&mut t, &d)).collect();
        (log, t)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn batch_step_averages_gradients() {
    let d = data(2);
    let loss = LossConfig::default();
    let base: Trainer<f32> = Trainer::new(Model::init(&ModelConfig::default(), 3), AdamConfig::default(), loss);
    let ex: Vec<Example<'_>> = d
        .iter()
        .map(|(frames, ann, feats)| Example {
            frames,
            ref_index: 0,
            teacher: Some(feats),
            scores: &ann.scores,
            groups: &ann.groups,
        })
        .collect();
    let mut batched = base.clone();
    let values = batched.step_batch(&ex).unwrap();
    assert_eq!(values.len(), 2);
    assert_eq!(batched.adam.step, 1);
    assert_ne!(batched.model, base.model);
    assert!(base.clone().step_batch(&[]).is_err());
}
