mod common;

use std::thread;

use common::{serve_sweep_gap, small_model, text_data, text_server};
use serde_json::json;
use simulmt::cascade::TimedWord;
use simulmt::data::toy_vocabulary;
use simulmt::harness::{serve_eval, EvalClient, ServeTestSet};
use simulmt::metrics::SweepSystem;
use simulmt::training::WaitK;

#[test]
fn reading_everything_then_writing_the_reference_scores_perfectly() {
    let d = text_data(31, 5);
    let server = text_server(&d);
    let mut c = EvalClient::connect(server.local_addr()).unwrap();
    for id in 0..d.refs.len() {
        c.start(id, "oracle", WaitK::Infinite).unwrap();
        let mut seen = Vec::new();
        while let Some(tok) = c.read_token().unwrap() {
            seen.push(tok);
        }
        assert_eq!(seen, d.words[id]);
        assert!(c.read_token().unwrap().is_none());
        for w in d.refs[id].split_whitespace() {
            c.write_token(w).unwrap();
        }
        let done = c.write_token("</s>").unwrap();
        assert_eq!(done["done"], json!(true));
        assert_eq!(done["al_words"], json!((d.words[id].len() + 1) as f64));
    }
    let rec = c.score("oracle", WaitK::Infinite).unwrap();
    assert_eq!(rec.bleu, 1.0);
    let mean_src = d.ids.iter().map(|x| x.len() as f64).sum::<f64>() / d.ids.len() as f64;
    assert!((rec.al_words - mean_src).abs() < 1e-12);
    assert!(rec.al_ms.is_none());
    server.shutdown();
}

#[test]
fn malformed_frames_get_an_error_and_the_server_survives() {
    let d = text_data(31, 2);
    let server = text_server(&d);
    let addr = server.local_addr();
    for bad in [
        "not json",
        r#"{"act":"DANCE"}"#,
        r#"{"act":"READ"}"#,
        r#"{"act":"START","id":99,"system":"s","k":3}"#,
        r#"{"act":"START","id":0,"system":"s","k":3,"extra":1}"#,
    ] {
        let mut c = EvalClient::connect(addr).unwrap();
        assert!(c.send_line(bad).is_err(), "{bad}");
    }
    let mut c = EvalClient::connect(addr).unwrap();
    c.start(0, "s", WaitK::Finite(3)).unwrap();
    assert!(c.read_token().unwrap().is_some());
    assert!(c.start(1, "s", WaitK::Finite(3)).is_err());
    server.shutdown();
}

#[test]
fn wait_k_client_reproduces_offline_sweep() {
    let d = text_data(31, 12);
    let systems: Vec<SweepSystem<_>> = (0..2)
        .map(|i| SweepSystem {
            id: format!("sys{i}"),
            models: vec![small_model(40 + i, d.vocab.len(), 8, 2)],
        })
        .collect();
    let ks = [
        WaitK::Finite(1),
        WaitK::Finite(3),
        WaitK::Finite(7),
        WaitK::Infinite,
    ];
    assert!(serve_sweep_gap(&systems, &ks, &d) <= 1e-12);
}

#[test]
fn concurrent_sessions_are_isolated() {
    let d = text_data(31, 6);
    let server = text_server(&d);
    let addr = server.local_addr();
    let handles: Vec<_> = (0..d.refs.len())
        .map(|id| {
            let words = d.words[id].clone();
            let reference = d.refs[id].clone();
            thread::spawn(move || {
                let mut c = EvalClient::connect(addr).unwrap();
                c.start(id, "par", WaitK::Infinite).unwrap();
                let mut seen = Vec::new();
                while let Some(t) = c.read_token().unwrap() {
                    seen.push(t);
                }
                assert_eq!(seen, words);
                for w in reference.split_whitespace() {
                    c.write_token(w).unwrap();
                }
                c.write_token("</s>").unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let mut c = EvalClient::connect(addr).unwrap();
    assert_eq!(c.score("par", WaitK::Infinite).unwrap().bleu, 1.0);
    assert_eq!(server.finished_sessions(), d.refs.len());
    server.shutdown();
}

#[test]
fn speech_sessions_reveal_words_by_audio_block() {
    let stream = vec![
        TimedWord::new("one", 0.0, 300.0),
        TimedWord::new("two", 400.0, 300.0),
        TimedWord::new("three", 1500.0, 300.0),
    ];
    let vocab = toy_vocabulary();
    let server = serve_eval(
        "127.0.0.1:0",
        ServeTestSet::Speech {
            streams: vec![stream],
            references: vec!["1 2 3 4".into()],
            block_ms: 500.0,
        },
        vocab,
        None,
    )
    .unwrap();
    let mut c = EvalClient::connect(server.local_addr()).unwrap();
    c.start(0, "asr", WaitK::Finite(2)).unwrap();
    let mut revealed = Vec::new();
    loop {
        let v = c.request(&json!({"act": "READ"})).unwrap();
        if v.get("eos").is_some() {
            break;
        }
        assert_eq!(v["block_ms"], json!(500.0));
        revealed.push(v["words"].as_array().unwrap().len());
    }
    assert_eq!(revealed, vec![1, 1, 0, 1]);
    for w in ["1", "2", "3", "4"] {
        c.write_token(w).unwrap();
    }
    let done = c.write_token("</s>").unwrap();
    assert_eq!(done["al_ms"], json!(1800.0));
    let rec = c.score("asr", WaitK::Finite(2)).unwrap();
    assert_eq!(rec.bleu, 1.0);
    assert_eq!(rec.al_ms, Some(1800.0));
    server.shutdown();
}
