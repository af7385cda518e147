use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use seq2seq_asr::autodiff::Tensor;
use seq2seq_asr::model::{Model, ModelConfig};
use seq2seq_asr::search::greedy_decode;
use seq2seq_asr::text::{BpeModel, TranscriptCorpus, Utterance};
use seq2seq_asr_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(s2s_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn bundled_config_counts() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(s2s_config_bundled(c("full").as_ptr(), &mut cfg), S2sStatus::Ok);
        let mut n = S2sParamCounts::default();
        assert_eq!(s2s_config_param_counts(cfg, &mut n), S2sStatus::Ok);
        assert_eq!(n.total, n.encoder + n.decoder);
        assert!((n.total as f64 - 280.1e6).abs() / 280.1e6 <= 0.02);
        assert_eq!(s2s_config_set(cfg, c("enc_layers").as_ptr(), c("6").as_ptr()), S2sStatus::Ok);
        let mut m = S2sParamCounts::default();
        s2s_config_param_counts(cfg, &mut m);
        assert!(m.encoder < n.encoder);
        s2s_config_free(cfg);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(s2s_config_bundled(c("nope").as_ptr(), &mut cfg), S2sStatus::Config);
        assert_eq!(s2s_config_bundled(c("toy").as_ptr(), &mut cfg), S2sStatus::Ok);
        assert_eq!(s2s_config_set(cfg, c("no_such_key").as_ptr(), c("1").as_ptr()), S2sStatus::Config);
        assert!(last_error().contains("no_such_key"), "{}", last_error());
        assert_eq!(s2s_config_set(cfg, ptr::null(), c("1").as_ptr()), S2sStatus::NullPointer);
        s2s_config_free(cfg);
        let mut model = ptr::null_mut();
        assert_eq!(s2s_model_load(c("/nonexistent/model.ckpt").as_ptr(), &mut model), S2sStatus::Data);
        assert!(model.is_null());
        assert_eq!(s2s_config_load(c("/nonexistent.conf").as_ptr(), &mut cfg), S2sStatus::Data);
        s2s_config_free(ptr::null_mut());
        s2s_model_free(ptr::null_mut());
        s2s_bpe_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(s2s_version()) }.to_bytes().is_empty());
}

#[test]
fn word_errors_hand_case() {
    let mut e = S2sEditCounts::default();
    unsafe {
        assert_eq!(s2s_word_errors(c("a b c").as_ptr(), c("a x c d").as_ptr(), &mut e), S2sStatus::Ok);
    }
    assert_eq!(e, S2sEditCounts { substitutions: 1, deletions: 0, insertions: 1, reference_words: 3 });
}

#[test]
fn greedy_decode_and_bpe_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::toy(4, 9);
    cfg.enc_hidden = 8;
    cfg.enc_reduce = 8;
    cfg.enc_out = 8;
    cfg.lm_lstm = 8;
    cfg.fusion_lstm = 8;
    cfg.bottleneck = 8;
    cfg.att_hidden = 8;
    let model = Model::build(cfg, 3).unwrap();
    let mp = dir.path().join("m.ckpt");
    model.save(&mp).unwrap();
    let feats: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
    let expected = greedy_decode(&model, &Tensor::matrix(10, 4, feats.clone()), 1.5).unwrap();

    let utt = |id: &str, text: &str| Utterance { id: id.into(), speaker: "s".into(), text: text.into() };
    let corpus = TranscriptCorpus { utterances: vec![utt("a", "ab ab ba"), utt("b", "ba ab")] };
    let bpe = BpeModel::train(&corpus, 8, 1).unwrap().model;
    let bp = dir.path().join("bpe.txt");
    bpe.save(&bp).unwrap();

    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(s2s_model_load(c(mp.to_str().unwrap()).as_ptr(), &mut m), S2sStatus::Ok);
        assert_eq!(s2s_model_feature_dim(m), 4);
        assert_eq!(s2s_model_vocab_size(m), 9);
        let mut out = vec![0u32; 64];
        let mut len = 0;
        assert_eq!(s2s_model_greedy_decode(m, feats.as_ptr(), 10, 4, 1.5, out.as_mut_ptr(), out.len(), &mut len), S2sStatus::Ok);
        assert_eq!(out[..len].iter().map(|&t| t as usize).collect::<Vec<_>>(), expected);
        assert_eq!(s2s_model_greedy_decode(m, feats.as_ptr(), 10, 3, 1.5, out.as_mut_ptr(), out.len(), &mut len), S2sStatus::Data);
        s2s_model_free(m);

        let mut b = ptr::null_mut();
        assert_eq!(s2s_bpe_load(c(bp.to_str().unwrap()).as_ptr(), &mut b), S2sStatus::Ok);
        let ids: Vec<u32> = bpe.encode_sentence("ab ba").iter().map(|&t| t as u32).collect();
        let mut needed = 0;
        let mut small = [0 as std::ffi::c_char; 2];
        assert_eq!(s2s_bpe_decode(b, ids.as_ptr(), ids.len(), small.as_mut_ptr(), 2, &mut needed), S2sStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(s2s_bpe_decode(b, ids.as_ptr(), ids.len(), buf.as_mut_ptr(), needed, &mut needed), S2sStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), bpe.decode(&bpe.encode_sentence("ab ba")));
        s2s_bpe_free(b);
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let src = "#include \"seq2seq_asr.h\"\nint main(void) { S2sEditCounts e; return s2s_word_errors(\"a\", \"a\", &e) == S2S_STATUS_OK ? 0 : 1; }\n";
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("t.c");
    std::fs::write(&file, src).unwrap();
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-I", inc]).arg(&file).status() {
        Ok(s) => assert!(s.success()),
        Err(e) => eprintln!("no C compiler available: {}", e),
    }
}
