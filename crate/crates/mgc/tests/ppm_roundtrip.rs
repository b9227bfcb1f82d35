use mgc::ppm::{decode, encode};
use proptest::prelude::*;

fn header() -> impl Strategy<Value = (usize, usize, u32, String)> {
    (1usize..6, 1usize..6, 1u32..=255, prop::sample::select(vec![" ", "\n", "\t", "  \n# note\n"]))
        .prop_map(|(w, h, maxval, sep)| (w, h, maxval, sep.to_string()))
}

proptest! {
    #[test]
    fn encode_reproduces_payload((w, h, maxval, sep) in header(), seed in any::<u64>()) {
        let payload: Vec<u8> = (0..w * h * 3).map(|i| ((seed >> (i % 56)) as u32 % (maxval + 1)) as u8).collect();
        let mut file = format!("P6{sep}{w}{sep}{h}{sep}{maxval}\n").into_bytes();
        file.extend_from_slice(&payload);
        let ppm = decode(&file).unwrap();
        prop_assert_eq!(&ppm.data, &payload);
        let again = encode(&ppm);
        prop_assert_eq!(decode(&again).unwrap(), ppm);
        prop_assert!(again.ends_with(&payload));
    }
}
