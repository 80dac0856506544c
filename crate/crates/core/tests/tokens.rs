use motif::tokens::{
    class_histograms, collate, frame, read_corpus, write_corpus, TokenSequence, Vocabulary, END,
    NUM_RESERVED, PAD, START, UNK,
};
use proptest::prelude::*;

fn seqs_strategy() -> impl Strategy<Value = Vec<TokenSequence>> {
    prop::collection::vec(
        (
            prop::collection::vec(0u32..500, 1..30),
            prop::option::of(0u32..5),
            0usize..4,
        ),
        1..20,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(ids, l, p)| TokenSequence::new(ids, l, format!("p{p}")))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_files_round_trip(seqs in seqs_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_corpus(&path, &seqs).unwrap();
        prop_assert_eq!(read_corpus(&path).unwrap(), seqs);
    }

    #[test]
    fn framing_encodes_and_decodes(seqs in seqs_strategy(), extra in 500u32..600) {
        let vocab = Vocabulary::build(seqs.iter()).unwrap();
        let distinct: std::collections::HashSet<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        prop_assert_eq!(vocab.observed(), distinct.len());
        prop_assert_eq!(vocab.size(), distinct.len() + NUM_RESERVED as usize);
        for s in &seqs {
            let f = frame(s, &vocab);
            prop_assert_eq!(f.ids.len(), s.ids.len() + 2);
            prop_assert_eq!(f.ids[0], START);
            prop_assert_eq!(*f.ids.last().unwrap(), END);
            for (&id, &sym) in f.ids[1..f.ids.len() - 1].iter().zip(&s.ids) {
                prop_assert!(id >= NUM_RESERVED);
                prop_assert_eq!(vocab.decode(id), Some(sym));
            }
        }
        prop_assert_eq!(vocab.encode(extra), UNK);
        let again = Vocabulary::from_symbols(vocab.symbols().to_vec()).unwrap();
        prop_assert_eq!(again.hash(), vocab.hash());
    }

    #[test]
    fn collation_pads_at_the_tail(seqs in seqs_strategy()) {
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let b = collate(&refs);
        let max = seqs.iter().map(|s| s.len()).max().unwrap();
        for (row, s) in b.ids.iter().zip(&seqs) {
            prop_assert_eq!(row.len(), max);
            prop_assert_eq!(&row[..s.len()], &s.ids[..]);
            prop_assert!(row[s.len()..].iter().all(|&x| x == PAD));
        }
    }

    #[test]
    fn class_histograms_are_distributions(seqs in seqs_strategy()) {
        let h = class_histograms(&seqs);
        for (class, hist) in &h.classes {
            let total: f64 = hist.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let count: usize = seqs.iter().filter(|s| s.label == Some(*class)).map(|s| s.len()).sum();
            let top = h.top_fraction(*class).unwrap();
            let best = seqs
                .iter()
                .filter(|s| s.label == Some(*class))
                .flat_map(|s| s.ids.iter())
                .fold(std::collections::HashMap::new(), |mut m, id| {
                    *m.entry(*id).or_insert(0usize) += 1;
                    m
                })
                .into_values()
                .max()
                .unwrap();
            prop_assert!((top - best as f64 / count as f64).abs() < 1e-12);
        }
    }
}
