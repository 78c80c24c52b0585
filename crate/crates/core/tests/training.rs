//! Retrieval training smoke run on a 50-query synthetic corpus.

use qr_core::corpus::{make_split, Corpus};
use qr_core::encoders::{BiEncoder, BiEncoderConfig};
use qr_core::mining::{group_copurchase, mine_pairs, MiningMode, QueryPair, DEFAULT_FLOOR};
use qr_core::normalizer::singleton_groups;
use qr_core::synthgen::{generate, SynthConfig};
use qr_core::training::{train_retriever, RetrievalContext, RetrievalExample, TrainConfig};

fn examples(corpus: &Corpus, pairs: &[QueryPair]) -> Vec<RetrievalExample> {
    pairs
        .iter()
        .flat_map(|p| [p.clone(), p.reversed()])
        .map(|p| RetrievalExample {
            anchor: corpus.query(p.source).raw_text.clone(),
            positive: corpus.query(p.target).raw_text.clone(),
            importance: p.importance,
        })
        .collect()
}

#[test]
fn validation_loss_drops_over_ten_epochs() {
    let synth = generate(&SynthConfig {
        n_intents: 5,
        queries_per_intent: 10,
        n_heads: 3,
        n_modifiers: 3,
        purchases_per_intent: 300,
        n_audit_pairs: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = Corpus::from_rows(&synth.rows, 1, 20).unwrap();
    assert_eq!(corpus.len(), 50);
    let groups = singleton_groups(&corpus);
    let copurchase = group_copurchase(&groups, 1);
    let pairs = mine_pairs(&groups, &copurchase, 1, DEFAULT_FLOOR, MiningMode::Proposed).unwrap();
    let split = make_split(&pairs, 5, 0).unwrap();
    let (train, val) = (examples(&corpus, &split.train), examples(&corpus, &split.validation));
    let context = RetrievalContext::new(pairs.iter().map(|p| {
        (corpus.query(p.source).raw_text.as_str(), corpus.query(p.target).raw_text.as_str())
    }));

    let mut model = BiEncoder::new(BiEncoderConfig::default()).unwrap();
    let config = TrainConfig { epochs: 10, ..TrainConfig::default() };
    let trace = train_retriever(&mut model, &train, &val, &context, &config).unwrap();
    let first = trace.initial().unwrap().val_loss.unwrap();
    let last = trace.last().unwrap().val_loss.unwrap();
    assert_eq!(trace.epochs.len(), 11);
    assert!(last < first, "validation loss {first} -> {last}");
}
