use std::ffi::{CStr, CString};
use std::ptr;

use elastic_attention::attention::{serial_dispatch, streaming_rho, AttnMode, SparsityPattern};
use elastic_attention::checkpoint::Checkpoint;
use elastic_attention::config::RunConfig;
use elastic_attention::eval::{run_sequence, Routing};
use elastic_attention::model::Backbone;
use elastic_attention::rng::{stream, uniform_tensor};
use elastic_attention::router::RouterParams;
use elastic_attention_ffi::*;

fn last_error() -> String {
    let p = ea_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn streaming_rho_matches_core() {
    for (len, sink, window) in [(16, 2, 4), (64, 4, 32), (5, 0, 10)] {
        assert_eq!(ea_streaming_rho(len, sink, window), streaming_rho(len, sink, window));
    }
}

#[test]
fn msr_counts_sparse_bytes() {
    let modes = [EA_MODE_SPARSE, EA_MODE_FULL, EA_MODE_SPARSE, EA_MODE_SPARSE];
    let mut out = 0.0;
    let st = unsafe { ea_msr(modes.as_ptr(), 2, 2, &mut out) };
    assert_eq!(st, EaStatus::Ok);
    assert_eq!(out, 0.75);
    assert!(ea_last_error_message().is_null());
}

#[test]
fn msr_rejects_bad_input() {
    let mut out = 0.0;
    assert_eq!(unsafe { ea_msr(ptr::null(), 1, 2, &mut out) }, EaStatus::NullPointer);
    assert!(last_error().contains("modes"));
    let modes = [7u8, 0];
    assert_eq!(unsafe { ea_msr(modes.as_ptr(), 1, 2, &mut out) }, EaStatus::InvalidInput);
    assert!(last_error().contains("0 or 1"));
    assert_eq!(unsafe { ea_msr(ptr::null(), 0, 0, &mut out) }, EaStatus::InvalidInput);
}

#[test]
fn hybrid_attention_matches_core_dispatch() {
    let (len, heads, d) = (9, 3, 4);
    let [q, k, v] = [0, 1, 2].map(|i| uniform_tensor(&mut stream(4, "ffi-test", i), &[len, heads * d], -2.0, 2.0));
    let modes = [EA_MODE_FULL, EA_MODE_SPARSE, EA_MODE_SPARSE];
    let core_modes = [AttnMode::Full, AttnMode::Sparse, AttnMode::Sparse];
    let cases = [
        (
            EaPattern {
                kind: EaPatternKind::Streaming,
                sink: 1,
                window: 3,
                block_size: 0,
                mass_threshold: 0.0,
            },
            SparsityPattern::Streaming { sink: 1, window: 3 },
        ),
        (
            EaPattern {
                kind: EaPatternKind::BlockSparse,
                sink: 0,
                window: 0,
                block_size: 2,
                mass_threshold: 0.8,
            },
            SparsityPattern::BlockSparse {
                block_size: 2,
                mass_threshold: 0.8,
            },
        ),
    ];
    for (pat, core_pat) in cases {
        let mut out = vec![0.0; len * heads * d];
        let st = unsafe {
            ea_hybrid_attention(
                q.data().as_ptr(),
                k.data().as_ptr(),
                v.data().as_ptr(),
                len,
                heads,
                d,
                modes.as_ptr(),
                &pat,
                out.as_mut_ptr(),
            )
        };
        assert_eq!(st, EaStatus::Ok);
        let (expect, _) = serial_dispatch(&q, &k, &v, heads, &core_modes, &core_pat).unwrap();
        assert_eq!(out, expect.data());
    }
}

#[test]
fn hybrid_attention_rejects_bad_pattern() {
    let data = vec![0.5; 8];
    let modes = [EA_MODE_SPARSE, EA_MODE_SPARSE];
    let pat = EaPattern {
        kind: EaPatternKind::Streaming,
        sink: 1,
        window: 0,
        block_size: 0,
        mass_threshold: 0.0,
    };
    let mut out = vec![0.0; 8];
    let p = data.as_ptr();
    let st = unsafe { ea_hybrid_attention(p, p, p, 2, 2, 2, modes.as_ptr(), &pat, out.as_mut_ptr()) };
    assert_eq!(st, EaStatus::Config);
    assert!(last_error().contains("window"));
}

#[test]
fn missing_checkpoint_reports_category() {
    let path = CString::new("/nonexistent/elastic-attention/ckpt").unwrap();
    let mut m: *mut EaModel = ptr::null_mut();
    let st = unsafe { ea_model_load(path.as_ptr(), &mut m) };
    assert_eq!(st, EaStatus::Checkpoint);
    assert!(m.is_null());
    assert!(last_error().contains("/nonexistent"));
    unsafe { ea_model_free(ptr::null_mut()) };
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.seq_len = 24;
    cfg.model.mlp_hidden = 16;
    cfg.pattern.window = 8;
    cfg
}

#[test]
fn model_handle_round_trip() {
    let cfg = small_config();
    let m = &cfg.model;
    let backbone = Backbone::init(m, 3);
    let router = RouterParams::init(3, m.layers, m.d_head, cfg.router_hidden());
    let mut ckpt = Checkpoint::new(cfg.clone(), backbone.clone(), "adamw", 0);
    ckpt.router = Some(router.clone());
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h: *mut EaModel = ptr::null_mut();
    assert_eq!(unsafe { ea_model_load(path.as_ptr(), &mut h) }, EaStatus::Ok);

    let mut dims = EaModelDims::default();
    assert_eq!(unsafe { ea_model_dims(h, &mut dims) }, EaStatus::Ok);
    assert_eq!((dims.layers, dims.heads, dims.vocab), (m.layers, m.heads, m.vocab));
    assert!(dims.has_router);

    let tokens: Vec<u32> = (0..m.seq_len as u32).map(|i| (i * 7 + 3) % m.vocab as u32).collect();
    let usize_tokens: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();

    let mut modes = vec![9u8; m.layers * m.heads];
    let st = unsafe { ea_model_route(h, tokens.as_ptr(), tokens.len(), modes.as_mut_ptr(), modes.len()) };
    assert_eq!(st, EaStatus::Ok);
    let (logits, grid) = run_sequence(&backbone, &cfg, &usize_tokens, &Routing::Router(&router)).unwrap();
    let expect: Vec<u8> = grid.iter().flatten().map(|&x| u8::from(x == AttnMode::Sparse)).collect();
    assert_eq!(modes, expect);

    let mut pred = vec![0u32; tokens.len()];
    let st = unsafe { ea_model_predict(h, tokens.as_ptr(), tokens.len(), true, pred.as_mut_ptr()) };
    assert_eq!(st, EaStatus::Ok);
    for (i, &p) in pred.iter().enumerate() {
        let row = logits.row(i);
        assert!(row.iter().all(|&x| x <= row[p as usize]));
    }

    let mut short = vec![0u8; 3];
    let st = unsafe { ea_model_route(h, tokens.as_ptr(), tokens.len(), short.as_mut_ptr(), short.len()) };
    assert_eq!(st, EaStatus::InvalidInput);

    let bad = [m.vocab as u32];
    let st = unsafe { ea_model_predict(h, bad.as_ptr(), 1, false, pred.as_mut_ptr()) };
    assert_eq!(st, EaStatus::InvalidInput);
    assert!(last_error().contains("out of range"));

    unsafe { ea_model_free(h) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/elastic_attention.h")).unwrap();
    for name in [
        "ea_last_error_message",
        "ea_model_load",
        "ea_model_free",
        "ea_model_route",
        "ea_model_predict",
        "ea_hybrid_attention",
        "ea_msr",
        "ea_streaming_rho",
        "typedef struct EaModel EaModel",
        "EA_STATUS_CHECKPOINT = 4",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"elastic_attention.h\"\nint main(void) { return ea_streaming_rho(4, 1, 1) > 1.0; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
