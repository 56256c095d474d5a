use attn_distill::datagen::{DatasetConfig, MotionPattern, Split, SpriteShape, SyntheticSample};
use attn_distill::harness::{
    infer, load_checkpoint, save_checkpoint, train_student, train_teacher, Checkpoint, ModelRole, Network, Reference,
    RunConfig,
};
use attn_distill::losses::total_loss;
use attn_distill::rng::stream;
use attn_distill::tensor::{bind, Tape, Tensor};
use attn_distill::Error;

fn tiny_data() -> Vec<SyntheticSample> {
    let cfg = DatasetConfig {
        frames: 8,
        height: 16,
        width: 16,
        shapes: vec![SpriteShape::Square, SpriteShape::Cross],
        motions: vec![MotionPattern::DriftRight, MotionPattern::DriftDown],
        distractor_shapes: vec![SpriteShape::Triangle],
        train_per_class: 3,
        test_per_class: 2,
        sprite_size: 5,
        speed_min: 1.0,
        speed_max: 1.0,
        distractors_min: 0,
        distractors_max: 1,
    };
    cfg.generate_split(4, Split::Train).unwrap()
}

fn tiny(role: ModelRole) -> RunConfig {
    RunConfig {
        classes: 4,
        epochs: 2,
        batch_size: 4,
        widths: vec![4, 4, 4],
        attn_channels: 4,
        seed: 9,
        ..RunConfig::student(role)
    }
}

fn tiny_teacher(data: &[SyntheticSample]) -> Checkpoint {
    train_teacher(data, &tiny(ModelRole::TeacherFlow)).unwrap().checkpoint
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = tiny_data();
    let mut config = tiny(ModelRole::TeacherFlow);
    config.epochs = 0;
    let run = train_teacher(&data, &config).unwrap();
    let net = Network::new(&config).unwrap();
    let (params, stats) = net.init::<f32, _>(&mut stream(config.seed, "harness/init")).unwrap();
    assert_eq!(run.checkpoint.params, params);
    assert_eq!(run.checkpoint.stats, stats);
    assert!(run.checkpoint.velocity.values().flatten().all(|&v| v == 0.0));
    assert!(run.log.lines.is_empty());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let data = tiny_data();
    let a = tiny_teacher(&data);
    let b = tiny_teacher(&data);
    assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    let mut other = tiny(ModelRole::TeacherFlow);
    other.seed = 10;
    let c = train_teacher(&data, &other).unwrap().checkpoint;
    assert_ne!(a.params, c.params);
}

#[test]
fn switched_off_distillation_matches_the_baseline_trace() {
    let data = tiny_data();
    let teacher = tiny_teacher(&data);
    let mut distill = tiny(ModelRole::StudentDistill);
    distill.lambda1 = Some(0.0);
    distill.lambda2 = Some(0.0);
    let mut baseline = tiny(ModelRole::StudentBaseline);
    baseline.lambda2 = Some(0.0);
    let d = train_student(&data, &distill, Some(&teacher)).unwrap();
    let b = train_student(&data, &baseline, None).unwrap();
    assert_eq!(d.log.totals(), b.log.totals());
    assert_eq!(d.checkpoint.params, b.checkpoint.params);
}

#[test]
fn student_training_leaves_the_teacher_untouched() {
    let data = tiny_data();
    let teacher = tiny_teacher(&data);
    let before = teacher.encode().unwrap();
    for role in [
        ModelRole::StudentDistill,
        ModelRole::StudentFeatMatch,
        ModelRole::StudentOracleAttn,
    ] {
        train_student(&data, &tiny(role), Some(&teacher)).unwrap();
        assert_eq!(teacher.encode().unwrap(), before, "{role}");
    }
}

#[test]
fn objective_has_no_gradient_into_teacher_parameters() {
    let data = tiny_data();
    let teacher = tiny_teacher(&data);
    let student_cfg = tiny(ModelRole::StudentDistill);
    let student = Network::new(&student_cfg).unwrap();
    let teacher_net = Network::new(&teacher.config).unwrap();
    let (params, mut stats) = student.init::<f32, _>(&mut stream(1, "init")).unwrap();

    let mut tape = Tape::new();
    let teacher_vars = bind(&mut tape, &teacher.params, false);
    let mut teacher_stats = teacher.stats.clone();
    let flows: Vec<&Tensor<f32>> = data[..2].iter().map(|s| &s.flow).collect();
    let flow = tape.constant(Tensor::stack(&flows).unwrap());
    let mut rng = stream(1, "noise");
    let t_out = teacher_net
        .forward(
            &mut tape,
            &teacher_vars,
            &mut teacher_stats,
            flow,
            Reference::default(),
            false,
            &mut rng,
        )
        .unwrap();

    let student_vars = bind(&mut tape, &params, true);
    let clips: Vec<&Tensor<f32>> = data[..2].iter().map(|s| &s.rgb).collect();
    let x = tape.constant(Tensor::stack(&clips).unwrap());
    let reference = Reference {
        map: Some(t_out.motion),
        features: None,
    };
    let fwd = student
        .forward(&mut tape, &student_vars, &mut stats, x, reference, true, &mut rng)
        .unwrap();
    let grid = student.grid([8, 16, 16]).unwrap();
    let labels: Vec<usize> = data[..2].iter().map(|s| s.label).collect();
    let inputs = student.loss_inputs(&fwd, &labels, reference, grid).unwrap();
    assert!(inputs.lambda1 > 0.0);
    let (loss, breakdown) = total_loss(&mut tape, &inputs).unwrap();
    assert!(breakdown.kl_distill > 0.0);
    tape.backward(loss).unwrap();
    for (name, &v) in &teacher_vars {
        assert!(tape.grad(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)), "{name}");
    }
    assert!(student_vars
        .values()
        .any(|&v| tape.grad(v).is_some_and(|g| g.iter().any(|&x| x != 0.0))));
}

#[test]
fn distillation_roles_need_their_teacher() {
    let data = tiny_data();
    for role in [
        ModelRole::StudentDistill,
        ModelRole::StudentFeatMatch,
        ModelRole::StudentOracleAttn,
    ] {
        let err = train_student(&data, &tiny(role), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{role}: {err}");
    }
    let baseline = train_student(&data, &tiny(ModelRole::StudentBaseline), None).unwrap();
    assert_eq!(baseline.log.epochs.len(), 2);
}

#[test]
fn invalid_configs_fail_before_training() {
    let data = tiny_data();
    let mut config = tiny(ModelRole::TeacherFlow);
    config.set_mode("prob-res").unwrap();
    assert!(matches!(train_teacher(&data, &config), Err(Error::Config(_))));
    let mut config = tiny(ModelRole::TeacherFlow);
    config.lambda1 = Some(0.5);
    assert!(matches!(train_teacher(&data, &config), Err(Error::Config(_))));
    assert!(matches!(
        train_teacher(&data, &tiny(ModelRole::StudentBaseline)),
        Err(Error::Config(_))
    ));
}

#[test]
fn missing_flow_is_a_dataset_error() {
    let mut data = tiny_data();
    data[1].flow = Tensor::zeros(vec![8, 16, 16, 1]);
    assert!(matches!(
        train_teacher(&data, &tiny(ModelRole::TeacherFlow)),
        Err(Error::Dataset(_))
    ));
    assert!(train_student(&data, &tiny(ModelRole::StudentBaseline), None).is_ok());
}

#[test]
fn checkpoint_file_round_trip_and_inference() {
    let data = tiny_data();
    let teacher = tiny_teacher(&data);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.adck");
    save_checkpoint(&teacher, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, teacher);
    save_checkpoint(&back, &dir.path().join("again.adck")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("again.adck")).unwrap()
    );

    let flows: Vec<&Tensor<f32>> = data.iter().map(|s| &s.flow).collect();
    let out = infer(&back, &flows, None, false).unwrap();
    assert_eq!(out.probs.len(), data.len());
    assert_eq!(out.motion_maps[0].shape(), &[2, 4, 4]);
    let rgb: Vec<&Tensor<f32>> = data.iter().map(|s| &s.rgb).collect();
    assert!(matches!(infer(&back, &rgb, None, false), Err(Error::Eval(_))));
}

#[test]
fn log_has_one_line_per_step() {
    let data = tiny_data();
    let run = train_teacher(&data, &tiny(ModelRole::TeacherFlow)).unwrap();
    // 12 clips in batches of 4 for 2 epochs
    assert_eq!(run.log.lines.len(), 6);
    let text = run.log.render();
    assert!(text.starts_with("epoch step ce kl_distill kl_uniform total lr\n"));
    for line in &run.log.lines {
        assert_eq!(line.split(' ').count(), 7);
    }
    for e in &run.log.epochs {
        assert!((e.mean.total - e.mean.recombined()).abs() < 1e-6);
    }
}
