//! End-to-end runs of the binary: exit codes, stdout columns, written files.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pnpgrad"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn selfcheck_passes_and_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out_flag = dir.path().join("a");
    let out = run(&["selfcheck", "--seed", "7", "--out", out_flag.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS ")).count(), 5, "{text}");
    assert!(!text.contains("FAIL"));

    let out_flag2 = dir.path().join("b");
    let out2 = run(&["selfcheck", "--seed", "7", "--out", out_flag2.to_str().unwrap()]);
    assert!(out2.status.success());
    let csv1 = std::fs::read(out_flag.join("selfcheck.csv")).unwrap();
    let csv2 = std::fs::read(out_flag2.join("selfcheck.csv")).unwrap();
    assert_eq!(csv1, csv2);
}

#[test]
fn bad_invocations_exit_one() {
    let out = run(&["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("ERROR:"), "{err}");
    assert!(err.contains("Usage"), "{err}");

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR:"));

    // Config-driven verbs without a config are validation errors.
    let out = run(&["restore"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--config"));

    // Schema violations surface as validation errors too.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[task]\nkind = deblur\nkernle_sigma = 1\n").unwrap();
    let out = run(&["restore", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("ERROR:"));
}

fn sr2_config(dir: &Path, iters: usize) -> String {
    format!(
        "[task]\nkind = sr2\nkernel = bicubic\nsigma_n = 0\n\n\
         [algorithm]\nkind = pnp_gd\nmu = 0.008\nsigma = 0.0047058823529411765\niters = {iters}\n\
         update = adam\n\n[prior]\nkind = tikhonov\n\n\
         [data]\nsynthetic_count = 1\nsynthetic_size = 16\nchannels = 1\n\n\
         [experiment]\nseed = 3\n\n[output]\ndir = {}\n",
        dir.display()
    )
}

#[test]
fn restore_runs_the_full_iteration_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sr2.cfg");
    std::fs::write(&cfg, sr2_config(dir.path(), 1500)).unwrap();
    let out = run(&["restore", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("image psnr_in psnr_out"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("mean ")), "{text}");

    let trace = std::fs::read_to_string(dir.path().join("synthetic000_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1501);
    assert!(dir.path().join("synthetic000_restored.png").exists());
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn set_overrides_reach_the_solver() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sr2.cfg");
    std::fs::write(&cfg, sr2_config(dir.path(), 1500)).unwrap();
    let out = run(&[
        "restore",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "algorithm.iters=3",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let trace = std::fs::read_to_string(dir.path().join("synthetic000_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let out = run(&[
        "restore",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "algorithm.itres=3",
    ]);
    assert_eq!(out.status.code(), Some(1), "typo in override must be rejected");
}

#[test]
fn training_verbs_produce_checkpoints_used_by_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pre_dir = dir.path().join("pre");
    let joint_dir = dir.path().join("joint");
    let train_cfg = dir.path().join("train.cfg");
    std::fs::write(
        &train_cfg,
        format!(
            "[training]\nsteps = 8\nbatch_size = 2\npatch_size = 12\nlr0 = 0.0001\n\n\
             [model]\nscales = 2\nbase_channels = 4\nblocks_per_scale = 1\n\n\
             [data]\nsynthetic_count = 4\nsynthetic_size = 24\nchannels = 1\n\n\
             [experiment]\nseed = 11\n\n[output]\ndir = {}\n",
            pre_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["pretrain", "--config", train_cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("steps 8"), "{text}");
    assert!(pre_dir.join("denoiser.ckpt").exists());
    assert!(pre_dir.join("training.csv").exists());
    assert!(pre_dir.join("loss.svg").exists());

    let joint_cfg = dir.path().join("joint.cfg");
    std::fs::write(
        &joint_cfg,
        format!(
            "[training]\nsteps = 6\nbatch_size = 2\npatch_size = 12\nlr0 = 0.0001\n\n\
             [model]\nscales = 2\nbase_channels = 4\nblocks_per_scale = 1\n\
             denoiser_init = {}\n\n\
             [data]\nsynthetic_count = 4\nsynthetic_size = 24\nchannels = 1\n\n\
             [experiment]\nseed = 12\n\n[output]\ndir = {}\n",
            pre_dir.join("denoiser.ckpt").display(),
            joint_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["train-joint", "--config", joint_cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("delta_rate "));
    assert!(joint_dir.join("grad_net.ckpt").exists());
    assert!(joint_dir.join("denoiser.ckpt").exists());

    let eval_cfg = dir.path().join("eval.cfg");
    std::fs::write(
        &eval_cfg,
        format!(
            "[eval]\nprobes = 4\npatch_size = 12\njacobian = yes\njacobian_size = 6\n\n\
             [model]\ndenoiser = {}\ngrad_net = {}\n\n\
             [data]\nsynthetic_count = 2\nsynthetic_size = 24\nchannels = 1\n\n\
             [experiment]\nseed = 13\n",
            joint_dir.join("denoiser.ckpt").display(),
            joint_dir.join("grad_net.ckpt").display()
        ),
    )
    .unwrap();
    let out = run(&["eval", "--config", eval_cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("heldout_denoise_l1 "), "{text}");
    assert!(text.contains("heldout_residual_identity "), "{text}");
    assert!(text.contains("jacobian_asymmetry "), "{text}");
}

#[test]
fn stability_study_runs_with_analytic_priors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let cfg = dir.path().join("study.cfg");
    std::fs::write(
        &cfg,
        format!(
            "[study]\nkind = admm_stability\nprior_a = tikhonov\nprior_b = laplacian\n\n\
             [task]\nkind = deblur\nkernel = gaussian\nkernel_size = 5\nkernel_sigma = 1.2\n\
             sigma_n = 0.01\n\n\
             [algorithm]\nkind = pnp_admm\ns_first = 0.2\ns_last = 0.2\niters = 30\n\n\
             [data]\nsynthetic_count = 1\nsynthetic_size = 16\nchannels = 1\n\n\
             [experiment]\nseed = 4\n\n[output]\ndir = {}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["study", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("variant iters final_iterate_mse"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("a 30 ")), "{text}");
    assert!(out_dir.join("stability_a_trace.csv").exists());
    assert!(out_dir.join("stability_b_trace.csv").exists());
    assert!(out_dir.join("stability_mse.svg").exists());
}

#[test]
fn ablation_study_compares_two_trained_pairs() {
    use pnpgrad::priors::checkpoint::save_checkpoint;
    use pnpgrad::priors::net::{DenoiserNet, RegGradNet};

    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("study");
    let mut paths = Vec::new();
    for (i, name) in
        ["d_joint.ckpt", "g_joint.ckpt", "d_frozen.ckpt", "g_frozen.ckpt"].iter().enumerate()
    {
        let path = dir.path().join(name);
        if name.starts_with('d') {
            let d = DenoiserNet::<f32>::new(1, 2, 4, 1, i as u64).unwrap();
            save_checkpoint(&path, d.unet(), 0).unwrap();
        } else {
            let g = RegGradNet::<f32>::new(1, 2, 4, 1, i as u64).unwrap();
            save_checkpoint(&path, g.unet(), 0).unwrap();
        }
        paths.push(path);
    }
    let cfg = dir.path().join("ablation.cfg");
    std::fs::write(
        &cfg,
        format!(
            "[study]\nkind = ablation\nprobes = 2\npatch_size = 12\n\
             denoiser_joint = {}\ngrad_joint = {}\ndenoiser_frozen = {}\ngrad_frozen = {}\n\n\
             [task]\nkind = deblur\nkernel = gaussian\nkernel_size = 5\nkernel_sigma = 1.4\n\
             sigma_n = 0.01\n\n\
             [algorithm]\nkind = pnp_gd\nmu = 0.1\nsigma = 0.05\niters = 10\nupdate = plain\n\n\
             [data]\nsynthetic_count = 2\nsynthetic_size = 16\nchannels = 1\n\n\
             [experiment]\nseed = 6\n\n[output]\ndir = {}\n",
            paths[0].display(),
            paths[1].display(),
            paths[2].display(),
            paths[3].display(),
            out_dir.display()
        ),
    )
    .unwrap();
    let out = run(&["study", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("image psnr_joint psnr_frozen"), "{text}");
    assert!(text.contains("residual_identity "), "{text}");
    assert!(out_dir.join("ablation.csv").exists());
    assert!(out_dir.join("ablation_psnr.svg").exists());
}
