mod support;

use bizinsight::anonymize::{contains_token_pattern, decode, encode, find_tokens, NameVault, UNKNOWN_ENTITY};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_text(&mut rng, 30);
        prop_assume!(!contains_token_pattern(&text));
        let names = random_names(&mut rng);
        let (encoded, vault) = encode(&text, &names, &NameVault::new("s")).unwrap();
        let (back, leaks) = decode(&encoded, &vault);
        prop_assert_eq!(back, text);
        prop_assert_eq!(leaks, 0);
    }

    /// Names that stand as whole words never survive encoding.
    #[test]
    fn standalone_names_are_hidden(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = random_names(&mut rng);
        prop_assume!(!names.is_empty());
        let text = names.join(" , ");
        let (encoded, vault) = encode(&text, &names, &NameVault::new("s")).unwrap();
        prop_assert_eq!(find_tokens(&encoded).len(), names.len());
        prop_assert!(find_tokens(&encoded).iter().all(|t| vault.name_for(t).is_some()));
    }

    #[test]
    fn injected_tokens_are_counted_as_leaks(seed in any::<u64>(), extra in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = random_text(&mut rng, 20);
        prop_assume!(!contains_token_pattern(&text));
        let (mut encoded, vault) = encode(&text, &random_names(&mut rng), &NameVault::new("s")).unwrap();
        let mut injected = 0;
        for _ in 0..extra {
            let t = format!(" ENT_{:08x} ", rng.random::<u32>());
            if vault.name_for(t.trim()).is_none() {
                encoded.push_str(&t);
                injected += 1;
            }
        }
        let (out, leaks) = decode(&encoded, &vault);
        prop_assert_eq!(leaks, injected);
        prop_assert_eq!(out.matches(UNKNOWN_ENTITY).count(), injected);
        prop_assert!(!contains_token_pattern(&out));
    }

    #[test]
    fn vault_json_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = NameVault::with_names("salt", &random_names(&mut rng)).unwrap();
        prop_assert_eq!(NameVault::from_json(&v.to_json()).unwrap(), v);
    }
}
