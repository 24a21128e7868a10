//! Train code embeddings on a synthetic cohort and inspect what they learned:
//! codes from the same cluster should be cosine-close, records should survive
//! an embed -> decode round trip, and the table should reload bit-exactly.
//!
//! Run with: cargo run --example train_embedding

use std::path::PathBuf;

use ehrgan::embedding::{
    embed_record, load_embedding, save_embedding, train_embedding, Decoded, Decoder, EmbedConfig,
};
use ehrgan::synth::{generate_cohort, CohortSpec};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() -> ehrgan::Result<()> {
    let spec = CohortSpec {
        vocab_size: 600,
        cases: 300,
        controls: 600,
        seed: 42,
        ..CohortSpec::default()
    };
    let (cohort, _) = generate_cohort(&spec)?;

    // Reduced dimension/epochs keep the example fast; the library default is
    // dim 200, 5 epochs.
    let cfg = EmbedConfig { dim: 64, epochs: 3, ..EmbedConfig::default() };
    let (table, stats) = train_embedding(&cohort, &cfg, 7)?;
    for (i, loss) in stats.per_epoch_loss.iter().enumerate() {
        println!("epoch {i}: mean pair loss {loss:.4}");
    }
    println!(
        "trained {} rows x {} dims over {} pairs/epoch ({} codes unseen)",
        table.rows(),
        table.dim(),
        stats.pairs_per_epoch,
        stats.untrained_codes.len()
    );

    // Codes striped into the same cluster co-occur, so they should sit closer
    // than a code pair drawn from different clusters.
    let in_cluster = spec.cluster_codes(0);
    let other = spec.cluster_codes(7);
    let same = cosine(table.row(in_cluster[0] as usize), table.row(in_cluster[1] as usize));
    let cross = cosine(table.row(in_cluster[0] as usize), table.row(other[0] as usize));
    println!("cosine within cluster 0: {same:.3}, cluster 0 vs 7: {cross:.3}");
    assert!(same > cross, "cluster structure not reflected in embeddings");

    // Embed a record and decode it back.
    let rec = &cohort.records[0];
    let (mat, true_len) = embed_record(rec, &table, 150)?;
    let decoder = Decoder::new(&table);
    let decoded = decoder.decode_rows(&mat)?;
    let codes: Vec<u32> = decoded
        .iter()
        .take_while(|(d, _)| !matches!(d, Decoded::End))
        .filter_map(|(d, _)| match d {
            Decoded::Code(c) => Some(*c),
            _ => None,
        })
        .collect();
    let original: Vec<u32> = rec.events.iter().map(|e| e.code).collect();
    assert_eq!(codes, original, "decode should invert embed for real records");
    assert!(matches!(decoded[true_len - 1].0, Decoded::End));
    assert!(matches!(decoded[true_len].0, Decoded::Pad));
    println!("record {} round-tripped through embed/decode ({} events)", rec.id, codes.len());

    let out_dir = PathBuf::from("target/examples/train_embedding");
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("embedding.ntck");
    save_embedding(&path, &table, 7)?;
    let reloaded = load_embedding(&path)?;
    assert_eq!(reloaded.vectors(), table.vectors(), "reload must be bit-exact");
    println!("saved and reloaded {} bit-exactly", path.display());
    Ok(())
}
