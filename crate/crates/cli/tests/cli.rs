mod common;

use common::{fails, ok, tpedit, Scene, SAMPLES, SMALL_FIELD};
use triplane_edit::io::{load_checkpoint, load_mask, load_rgb8};
use triplane_edit::{EditStack, EditToken, SelectionMask};

const EXIT_USAGE: i32 = 2;
const EXIT_DATA: i32 = 3;

#[test]
fn synth_pretrain_render_pipeline_writes_every_artifact() {
    let s = Scene::new();
    let (field, metrics) = load_checkpoint(&s.file("field.pnck")).unwrap();
    assert_eq!(metrics["regime"], "pretrain");
    assert_eq!(metrics["iterations"], "120");
    assert!(s.file("field.pnck.run.toml").is_file());
    assert!(s.file("data.run.toml").is_file());

    let out = ok(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "0",
            "--out",
            "view.png",
            "--depth",
            "depth.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    assert!(out.contains(&format!("field version {}", field.version)), "{out}");
    let (w, h, rgb) = load_rgb8(&s.file("view.png")).unwrap();
    assert_eq!((w, h, rgb.len()), (16, 16, 768));
    assert!(s.file("depth.png").is_file());
    let record = std::fs::read_to_string(s.file("view.png.run.toml")).unwrap();
    assert!(record.contains("config_hash"), "{record}");
}

#[test]
fn pretrain_reports_holdout_psnr() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--out",
            "data",
            "--width",
            "12",
            "--height",
            "12",
            "--train",
            "4",
            "--holdout",
            "2",
        ],
        dir.path(),
    );
    let mut args = vec![
        "pretrain",
        "--data",
        "data/scene.toml",
        "--out",
        "f.pnck",
        "--iters",
        "5",
        "--samples",
        "8",
        "--metrics",
        "m.jsonl",
    ];
    args.extend_from_slice(SMALL_FIELD);
    let out = ok(&args, dir.path());
    assert_eq!(out.lines().filter(|l| l.starts_with("holdout frame")).count(), 2, "{out}");
    assert!(out.contains("mean holdout PSNR"), "{out}");
    let metrics = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
}

#[test]
fn select_context_edit_and_layered_render() {
    let s = Scene::new();
    ok(
        &[
            "select",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "0",
            "--rect",
            "6,6,4,4",
            "--out",
            "sel.txt",
            "--mask",
            "sel.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    let sel = SelectionMask::load(&s.file("sel.txt")).unwrap();
    assert!((sel.thr - SelectionMask::calibrated_threshold(&sel.f_bar)).abs() < 1e-6);
    let (w, h, _) = load_mask(&s.file("sel.png")).unwrap();
    assert_eq!((w, h), (16, 16));

    ok(
        &[
            "context",
            "export",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--sel",
            "sel.txt",
            "--dir",
            "ctx",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    for f in [
        "context_rgb.png",
        "context_mask.png",
        "context_depth.png",
        "context.txt",
        "state.toml",
    ] {
        assert!(s.file("ctx").join(f).is_file(), "missing {f}");
    }
    let out = ok(
        &[
            "context",
            "import",
            "--ckpt",
            "field.pnck",
            "--dir",
            "ctx",
            "--mosaic",
            "ctx/context_rgb.png",
        ],
        s.path(),
    );
    assert!(out.contains("recorded 4 edited views"), "{out}");

    // A mosaic PNG and a context directory both drive token training.
    ok(
        &[
            "edit",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--sel",
            "sel.txt",
            "--context",
            "ctx/context_rgb.png",
            "--iters",
            "3",
            "--samples",
            SAMPLES,
            "--out",
            "a.pnet",
        ],
        s.path(),
    );
    ok(
        &[
            "edit",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--sel",
            "sel.txt",
            "--context",
            "ctx",
            "--iters",
            "3",
            "--samples",
            SAMPLES,
            "--kind",
            "color",
            "--label",
            "tint",
            "--out",
            "b.pnet",
        ],
        s.path(),
    );
    let b = EditToken::from_bytes(&std::fs::read(s.file("b.pnet")).unwrap()).unwrap();
    assert_eq!(b.label, "tint");

    ok(&["layers", "merge", "--out", "stack.pnls", "a.pnet", "b.pnet"], s.path());
    let stack = EditStack::from_bytes(&std::fs::read(s.file("stack.pnls")).unwrap()).unwrap();
    let ids: Vec<u64> = stack.tokens.iter().map(|t| t.id).collect();
    assert_eq!(ids, vec![1, 2], "colliding ids are reassigned");
    ok(&["layers", "toggle", "--stack", "stack.pnls", "--id", "1"], s.path());
    ok(&["layers", "reorder", "--stack", "stack.pnls", "--order", "2,1"], s.path());
    let stack = EditStack::from_bytes(&std::fs::read(s.file("stack.pnls")).unwrap()).unwrap();
    assert_eq!(
        stack.tokens.iter().map(|t| (t.id, t.enabled)).collect::<Vec<_>>(),
        vec![(2, true), (1, false)]
    );
    let listed = ok(&["layers", "list", "stack.pnls", "a.pnet"], s.path());
    assert!(listed.contains("tint"), "{listed}");

    ok(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "1",
            "--layers",
            "a.pnet",
            "--out",
            "edited.png",
            "--sel",
            "sel.txt",
            "--mask",
            "m.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    ok(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "1",
            "--sel",
            "sel.txt",
            "--delete",
            "selected",
            "--out",
            "deleted.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    ok(&["layers", "delete", "--stack", "stack.pnls", "--id", "2"], s.path());
    let (code, err) = fails(&["layers", "delete", "--stack", "stack.pnls", "--id", "2"], s.path());
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn context_protocol_advances_and_finetune_bumps_the_version() {
    let s = Scene::new();
    ok(
        &[
            "select",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "0",
            "--rect",
            "5,5,6,6",
            "--out",
            "sel.txt",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    let export = |ckpt: &str| {
        ok(
            &[
                "context",
                "export",
                "--ckpt",
                ckpt,
                "--data",
                "data",
                "--sel",
                "sel.txt",
                "--dir",
                "ctx",
                "--samples",
                SAMPLES,
            ],
            s.path(),
        )
    };
    let import = |ckpt: &str| {
        ok(
            &[
                "context",
                "import",
                "--ckpt",
                ckpt,
                "--dir",
                "ctx",
                "--mosaic",
                "ctx/context_rgb.png",
            ],
            s.path(),
        )
    };

    assert!(export("field.pnck").contains("epoch 1 of 3"));
    import("field.pnck");
    let out = ok(
        &[
            "finetune",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--sel",
            "sel.txt",
            "--context",
            "ctx",
            "--out",
            "ft.pnck",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    assert!(out.contains("on 4 edited views"), "{out}");
    let (before, _) = load_checkpoint(&s.file("field.pnck")).unwrap();
    let (after, metrics) = load_checkpoint(&s.file("ft.pnck")).unwrap();
    assert!(after.version > before.version);
    assert_eq!(metrics["regime"], "finetune");
    // One pass over four 16x16 views at 512 rays per batch.
    assert_eq!(metrics["iterations"], "2");

    assert!(export("ft.pnck").contains("epoch 2 of 3"));
    // The grid came from the fine-tuned field, so the older checkpoint is stale.
    let (code, err) = fails(
        &[
            "context",
            "import",
            "--ckpt",
            "field.pnck",
            "--dir",
            "ctx",
            "--mosaic",
            "ctx/context_rgb.png",
        ],
        s.path(),
    );
    assert_eq!(code, EXIT_DATA, "{err}");
    assert!(err.contains("stale provenance"), "{err}");
    import("ft.pnck");
    export("ft.pnck");
    let out = import("ft.pnck");
    assert!(out.contains("all 3 epochs edited"), "{out}");
    let state = std::fs::read_to_string(s.file("ctx/state.toml")).unwrap();
    assert_eq!(state.matches("[[views]]").count(), 8, "{state}");

    let (code, err) = fails(
        &[
            "context", "export", "--ckpt", "ft.pnck", "--data", "data", "--sel", "sel.txt", "--dir", "ctx",
        ],
        s.path(),
    );
    assert_eq!(code, EXIT_DATA, "{err}");
    let (code, _) = fails(
        &[
            "context",
            "import",
            "--ckpt",
            "ft.pnck",
            "--dir",
            "ctx",
            "--mosaic",
            "ctx/context_rgb.png",
        ],
        s.path(),
    );
    assert_eq!(code, EXIT_DATA);
    let out = ok(
        &[
            "context",
            "export",
            "--ckpt",
            "ft.pnck",
            "--data",
            "data",
            "--sel",
            "sel.txt",
            "--dir",
            "ctx",
            "--restart",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    assert!(out.contains("epoch 1 of 3"), "{out}");
}

#[test]
fn zero_iterations_is_a_usage_error() {
    let s = Scene::new();
    let (code, err) = fails(&["pretrain", "--data", "data", "--out", "x.pnck", "--iters", "0"], s.path());
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert!(!s.file("x.pnck").exists());
}

#[test]
fn malformed_inputs_map_to_their_exit_codes() {
    let s = Scene::new();
    let dir = s.path();
    std::fs::write(s.file("bad.toml"), "[train]\niteration = 3\n").unwrap();
    let (code, err) = fails(&["pretrain", "--data", "data", "--out", "x.pnck", "--config", "bad.toml"], dir);
    assert_eq!(code, EXIT_USAGE, "{err}");
    assert!(err.contains("iteration"), "{err}");

    std::fs::write(s.file("regime.toml"), "[train]\nregime = \"finetune\"\n").unwrap();
    assert_eq!(
        fails(&["pretrain", "--data", "data", "--out", "x.pnck", "--config", "regime.toml"], dir).0,
        EXIT_USAGE
    );

    let (code, err) = fails(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "99",
            "--out",
            "x.png",
        ],
        dir,
    );
    assert_eq!(code, EXIT_USAGE, "{err}");

    std::fs::write(s.file("junk.pnet"), b"not a token").unwrap();
    let (code, err) = fails(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "0",
            "--layers",
            "junk.pnet",
            "--out",
            "x.png",
        ],
        dir,
    );
    assert_eq!(code, EXIT_DATA, "{err}");

    std::fs::write(s.file("junk.pnck"), b"PNCK").unwrap();
    assert_eq!(
        fails(
            &["render", "--ckpt", "junk.pnck", "--data", "data", "--frame", "0", "--out", "x.png"],
            dir
        )
        .0,
        EXIT_DATA
    );
    assert_eq!(
        fails(
            &[
                "render",
                "--ckpt",
                "missing.pnck",
                "--data",
                "data",
                "--frame",
                "0",
                "--out",
                "x.png"
            ],
            dir
        )
        .0,
        EXIT_DATA
    );
    assert_eq!(fails(&["pretrain", "--data", "nowhere", "--out", "x.pnck"], dir).0, EXIT_DATA);

    std::fs::write(s.file("cam.toml"), "fx = -1.0\n").unwrap();
    assert_eq!(
        fails(&["render", "--ckpt", "field.pnck", "--camera", "cam.toml", "--out", "x.png"], dir).0,
        EXIT_USAGE
    );

    // Clap rejects the flag set itself.
    assert_eq!(
        tpedit(&["render", "--ckpt", "field.pnck", "--out", "x.png"], dir).status.code(),
        Some(EXIT_USAGE)
    );
    assert_eq!(
        fails(
            &[
                "select",
                "--ckpt",
                "field.pnck",
                "--data",
                "data",
                "--frame",
                "0",
                "--rect",
                "1,2,3",
                "--out",
                "s.txt"
            ],
            dir
        )
        .0,
        EXIT_USAGE
    );
}

#[test]
fn render_accepts_a_camera_file() {
    let s = Scene::new();
    let data = triplane_edit::io::load_dataset(&s.file("data/scene.toml")).unwrap();
    let camera = data.frames[2].camera;
    std::fs::write(s.file("cam.toml"), toml::to_string(&camera).unwrap()).unwrap();
    ok(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--camera",
            "cam.toml",
            "--out",
            "a.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    ok(
        &[
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "2",
            "--out",
            "b.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    assert_eq!(std::fs::read(s.file("a.png")).unwrap(), std::fs::read(s.file("b.png")).unwrap());
}

#[test]
fn explicit_record_path_is_honoured() {
    let s = Scene::new();
    ok(
        &[
            "--record",
            "runs/r.toml",
            "render",
            "--ckpt",
            "field.pnck",
            "--data",
            "data",
            "--frame",
            "0",
            "--out",
            "v.png",
            "--samples",
            SAMPLES,
        ],
        s.path(),
    );
    let text = std::fs::read_to_string(s.file("runs/r.toml")).unwrap();
    assert!(text.contains("command = \"render\""), "{text}");
    assert!(!s.file("v.png.run.toml").exists());
}
