use stylefield::error::Error;
use stylefield::feat::FeaturePipeline;
use stylefield::fixtures::{
    box_scene_spec, build_occlusion_scene, build_scene, build_style_image, single_box_spec, StyleKind,
};
use stylefield::grid::VoxelGrid;
use stylefield::loss::{tv_loss, LossConfig};
use stylefield::par;
use stylefield::render::{render_view, RenderOptions};
use stylefield::stylize::{
    finetune, gradient_audit, initial_grid, pretrain, step_gradients, Binding, OptimConfig, PretrainConfig, RmsProp, TaskMode,
    TaskSpec, View, INITIAL_DENSITY,
};

fn opts() -> RenderOptions {
    RenderOptions::default()
}

fn small_box() -> (VoxelGrid, Vec<View>, TaskSpec) {
    let pipeline = FeaturePipeline::default();
    let mut spec = box_scene_spec(2);
    spec.dims = [12; 3];
    let scene = build_scene(&spec).unwrap();
    let mut views = scene.views().unwrap();
    views.truncate(3);
    for v in &mut views {
        v.cache_content_features(&pipeline).unwrap();
    }
    let mut grid = scene.grid;
    grid.freeze_density();
    let style = build_style_image(StyleKind::Dots, 2, 32).target(&pipeline).unwrap();
    let optim = OptimConfig {
        steps: 40,
        seed: 9,
        ..OptimConfig::default()
    };
    (grid, views, TaskSpec::object_select(style, LossConfig::default(), optim))
}

fn sh_equal(a: &VoxelGrid, b: &VoxelGrid) -> bool {
    a.sh().iter().zip(b.sh()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn pretrain_keeps_an_exact_fit() {
    let scene = build_scene(&single_box_spec(0)).unwrap();
    let views = scene.views().unwrap();
    let out = pretrain(scene.grid.clone(), &views, &PretrainConfig::default(), &opts()).unwrap();
    assert!(out.losses[0] < 1e-12);
    assert!(out.grid.is_density_frozen());
    for (a, b) in out.grid.sh().iter().zip(scene.grid.sh()) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert_eq!(out.grid.density(), scene.grid.density());
}

#[test]
fn pretrain_with_no_steps_returns_the_input() {
    let scene = build_scene(&single_box_spec(0)).unwrap();
    let views = scene.views().unwrap();
    let init = initial_grid([8; 3], [-1.0; 3], [1.0; 3], 1, INITIAL_DENSITY, 1).unwrap();
    let cfg = PretrainConfig {
        steps: 0,
        ..PretrainConfig::default()
    };
    let out = pretrain(init.clone(), &views, &cfg, &opts()).unwrap();
    assert!(out.losses.is_empty());
    assert!(sh_equal(&out.grid, &init));
    assert_eq!(out.grid.density(), init.density());
}

#[test]
fn pretrain_reaches_psnr_floor_on_single_box() {
    let scene = build_scene(&single_box_spec(0)).unwrap();
    let views = scene.views().unwrap();
    let init = initial_grid([16; 3], [-1.0; 3], [1.0; 3], 1, INITIAL_DENSITY, 0).unwrap();
    let out = pretrain(init, &views, &PretrainConfig::default(), &opts()).unwrap();
    assert!(out.losses.len() <= 2000);
    for v in &views {
        let psnr = render_view(&out.grid, &v.camera, &opts()).unwrap().0.psnr(&v.gt_image);
        assert!(psnr >= 30.0, "{psnr} dB");
    }
}

#[test]
fn pretrain_rejects_single_view_and_nan() {
    let scene = build_scene(&single_box_spec(0)).unwrap();
    let mut views = scene.views().unwrap();
    let init = initial_grid([8; 3], [-1.0; 3], [1.0; 3], 1, INITIAL_DENSITY, 1).unwrap();
    assert!(matches!(
        pretrain(init.clone(), &views[..1], &PretrainConfig::default(), &opts()),
        Err(Error::Config(_))
    ));
    views[0].gt_image.data[0] = f64::NAN;
    assert!(matches!(
        pretrain(init, &views, &PretrainConfig::default(), &opts()),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn finetune_leaves_density_alone_and_descends() {
    let (grid, views, task) = small_box();
    let before = grid.density_hash();
    let (out, state) = finetune(grid.clone(), &views, &task, &FeaturePipeline::default(), &opts()).unwrap();
    assert_eq!(out.density_hash(), before);
    assert!(!sh_equal(&out, &grid));
    assert_eq!(state.step, 40);
    assert_eq!(state.records.len(), 40);
    assert!(state.optimizer.accumulator.iter().all(|&a| a >= 0.0));
    assert!(state.smoothed_total(40, 20) < state.records[0].report.total);
}

#[test]
fn finetune_is_deterministic_across_runs_and_threading() {
    let (grid, views, mut task) = small_box();
    task.optim.steps = 8;
    task.optim.views_per_step = Some(2);
    let pipeline = FeaturePipeline::default();
    let (a, sa) = finetune(grid.clone(), &views, &task, &pipeline, &opts()).unwrap();
    let (b, sb) = finetune(grid.clone(), &views, &task, &pipeline, &opts()).unwrap();
    let (c, sc) = par::sequential(|| finetune(grid.clone(), &views, &task, &pipeline, &opts()).unwrap());
    assert!(sh_equal(&a, &b) && sh_equal(&a, &c));
    assert_eq!(sa.records, sb.records);
    assert_eq!(sa.records, sc.records);
}

#[test]
fn all_preserve_fixed_point_moves_only_by_tv() {
    let scene = build_scene(&single_box_spec(3)).unwrap();
    let views = scene.views().unwrap();
    let mut grid = scene.grid.clone();
    grid.freeze_density();
    let style = build_style_image(StyleKind::Stripes, 0, 32).target(&FeaturePipeline::default()).unwrap();
    let mut task = TaskSpec::object_select(style, LossConfig::default(), OptimConfig::default());
    task.mode = TaskMode::Compositional;
    task.bindings.insert(1, Binding::Preserve);
    task.optim.steps = 1;
    let (out, state) = finetune(grid.clone(), &views, &task, &FeaturePipeline::default(), &opts()).unwrap();
    assert_eq!(state.records[0].report.preserve, 0.0);

    let mut expected = grid.clone();
    let (_, tv_grad) = tv_loss(&grid);
    let scaled: Vec<f64> = tv_grad.iter().map(|g| g * task.loss.lambda_tv).collect();
    let mut opt = RmsProp::new(grid.sh().len(), task.optim.step_size, task.optim.decay, task.optim.eps);
    opt.apply(expected.sh_mut(), &scaled);
    assert!(sh_equal(&out, &expected));
}

#[test]
fn finetune_contract_errors() {
    let (grid, mut views, task) = small_box();
    let pipeline = FeaturePipeline::default();

    let mut thawed = grid.clone();
    thawed.unfreeze_density();
    assert!(matches!(finetune(thawed, &views, &task, &pipeline, &opts()), Err(Error::Contract(_))));

    let mut unbound = task.clone();
    unbound.mode = TaskMode::Compositional;
    unbound.bindings.remove(&1);
    assert!(matches!(finetune(grid.clone(), &views, &unbound, &pipeline, &opts()), Err(Error::UnboundLabel(1))));

    views[1].gt_image.data[5] = 1.0 - views[1].gt_image.data[5];
    assert!(matches!(finetune(grid, &views, &task, &pipeline, &opts()), Err(Error::StaleFeatures(1))));
}

#[test]
fn audit_of_hidden_point_is_negligible() {
    let occ = build_occlusion_scene().unwrap();
    let pipeline = FeaturePipeline::default();
    let mut views = occ.scene.views().unwrap();
    for v in &mut views {
        v.cache_content_features(&pipeline).unwrap();
    }
    let style = build_style_image(StyleKind::Stripes, 0, 32).target(&pipeline).unwrap();
    let task = TaskSpec::object_select(style, LossConfig::default(), OptimConfig::default());
    // inside the wall, behind its opaque front face
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let hidden = gradient_audit(&occ.scene.grid, &views, &task, &pipeline, &opts(), [0.0, 0.0, 0.85]).unwrap();
    let seen = gradient_audit(&occ.scene.grid, &views, &task, &pipeline, &opts(), occ.point_a).unwrap();
    let seen_max = seen.view_weights.iter().cloned().fold(0.0, f64::max);
    assert!(hidden.view_weights.iter().all(|&w| w < 1e-2 * seen_max), "{:?}", hidden.view_weights);
    let all: Vec<usize> = (0..views.len()).collect();
    let total = step_gradients(&occ.scene.grid, &views, &all, &task, &pipeline, &opts()).unwrap().view_total;
    let k = occ.scene.grid.coeffs_per_voxel();
    let largest = total.chunks(k).map(norm).fold(0.0, f64::max);
    assert!(norm(&hidden.accumulated) < 1e-2 * largest);
    assert!(gradient_audit(&occ.scene.grid, &views, &task, &pipeline, &opts(), [0.0, 0.0, 1.5]).is_err());
}
