mod common;

use std::collections::HashSet;

use common::{tiny_config, toy_corpora};
use proptest::prelude::*;
use salprune::data::spt::{SptError, SptFile};
use salprune::data::{load_corpus, sample_calibration, ByteTokenizer, Split, TokenStream};
use salprune::model::Checkpoint;
use salprune::Error;

#[test]
fn toy_corpora_split_at_the_tail() {
    let (a, b) = toy_corpora();
    for s in [&a, &b] {
        let n = s.len();
        assert_eq!(s.validation().len(), (0.1 * n as f64).ceil() as usize);
        assert_eq!(s.train().len() + s.validation().len(), n);
        assert_eq!(s.validation_start(), s.train().len());
        assert!(s.tokens().iter().all(|&t| t < ByteTokenizer::BYTE_VOCAB));
    }
    let text = std::fs::read(common::repo_root().join("data/toy_clinical.txt")).unwrap();
    assert_eq!(a.len(), text.len());
}

#[test]
fn mixing_keeps_splits_disjoint() {
    let (a, b) = toy_corpora();
    let m = TokenStream::mix("mix", &[&a, &b]).unwrap();
    assert_eq!(m.train().len(), a.train().len() + b.train().len());
    assert_eq!(&m.train()[..a.train().len()], a.train());
    assert_eq!(&m.validation()[..a.validation().len()], a.validation());
    assert!(TokenStream::mix("none", &[]).is_err());
}

#[test]
fn calibration_windows_are_disjoint_train_slices() {
    let (a, _) = toy_corpora();
    let set = sample_calibration(&a, 64, 64, 7).unwrap();
    assert_eq!(set.count(), 64);
    let mut seen = HashSet::new();
    for (w, &o) in set.sequences.iter().zip(&set.offsets) {
        assert_eq!(w.len(), 64);
        assert!(o + 64 <= a.train().len());
        assert_eq!(w.as_slice(), &a.train()[o..o + 64]);
        assert_eq!(o % 64, 0);
        assert!(seen.insert(o));
    }
    assert_eq!(sample_calibration(&a, 64, 64, 7).unwrap(), set);
    assert_ne!(sample_calibration(&a, 64, 64, 8).unwrap().offsets, set.offsets);
    assert_eq!(set.head(10).sequences, set.sequences[..10]);
}

#[test]
fn corpus_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    assert!(matches!(load_corpus(&empty, Split::default()), Err(Error::EmptyCorpus(_))));
    assert!(matches!(load_corpus(&dir.path().join("missing.txt"), Split::default()), Err(Error::Io { .. })));
    let bad = Split {
        train: 0.8,
        validation: 0.1,
    };
    assert!(TokenStream::from_text("x", "abc", bad).is_err());
}

#[test]
fn spt_rejects_damaged_files() {
    let bytes = Checkpoint::init(tiny_config(), 1).unwrap().to_bytes().unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(SptFile::from_bytes(&magic), Err(Error::Spt(SptError::BadMagic { .. }))));
    assert!(matches!(
        SptFile::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Spt(SptError::Truncated { .. }))
    ));
    assert!(SptFile::from_bytes(&bytes[..6]).is_err());
    let file = SptFile::from_bytes(&bytes).unwrap();
    assert_eq!(file.to_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_hash_tracks_content() {
    let a = Checkpoint::init(tiny_config(), 1).unwrap();
    let b = Checkpoint::init(tiny_config(), 1).unwrap();
    let c = Checkpoint::init(tiny_config(), 2).unwrap();
    assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    assert_eq!(a.content_hash().unwrap().len(), 64);
}

proptest! {
    #[test]
    fn tokenizer_round_trips(s in ".{0,64}") {
        let ids = ByteTokenizer.encode(&s);
        prop_assert_eq!(ids.len(), s.len());
        prop_assert_eq!(ByteTokenizer.decode(&ids), s);
    }

    #[test]
    fn split_sizes_add_up(len in 1usize..500, v in 0.0f64..=1.0) {
        let text = "x".repeat(len);
        let s = TokenStream::from_text("x", &text, Split { train: 1.0 - v, validation: v }).unwrap();
        prop_assert_eq!(s.train().len() + s.validation().len(), len);
        prop_assert_eq!(s.validation().len(), ((v * len as f64).ceil() as usize).min(len));
    }
}
