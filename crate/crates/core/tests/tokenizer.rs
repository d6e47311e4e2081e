use proptest::prelude::*;
use streamvit::tokenizer::{SlotKind, TokenLayout};

proptest! {
    #[test]
    fn tau_is_monotone_and_onto(frames in 1usize..12, gh in 1usize..5, gw in 1usize..5, cam in any::<bool>()) {
        let l = TokenLayout::from_grid(frames, gh, gw, 8, cam);
        let taus: Vec<_> = (0..l.total()).map(|u| l.tau(u).unwrap()).collect();
        prop_assert!(taus.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(taus[0], 0);
        prop_assert_eq!(*taus.last().unwrap(), frames - 1);
        prop_assert!(taus.windows(2).all(|w| w[1] - w[0] <= 1));
        prop_assert!(l.tau(l.total()).is_err());
    }

    #[test]
    fn slot_counts(gh in 1usize..6, gw in 1usize..6, cam in any::<bool>()) {
        let l = TokenLayout::from_grid(1, gh, gw, 8, cam);
        let kinds = l.slot_kinds();
        prop_assert_eq!(kinds.len(), l.per_frame());
        prop_assert_eq!(kinds.iter().filter(|k| k.is_patch()).count(), gh * gw);
        prop_assert_eq!(kinds.iter().filter(|k| !k.is_patch()).count(), if cam { 6 } else { 5 });
        prop_assert_eq!(kinds.iter().filter(|k| **k == SlotKind::Cam).count(), usize::from(cam));
    }
}
