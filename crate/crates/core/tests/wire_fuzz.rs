mod common;

use common::wire_gen::{check_round_trip, message};
use kresolver::wire::{self, RData, WireError};
use proptest::prelude::*;

proptest! {
    #[test]
    fn round_trip(m in message()) {
        prop_assert_eq!(check_round_trip(&m), Ok(()));
    }

    #[test]
    fn random_bytes_never_panic(buf in prop::collection::vec(any::<u8>(), 0..600)) {
        let _ = wire::decode_message(&buf);
    }

    #[test]
    fn mutated_messages_never_panic(
        m in message(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut bytes = m.to_bytes().unwrap();
        for (at, value) in flips {
            let i = at.index(bytes.len());
            bytes[i] = value;
        }
        let _ = wire::decode_message(&bytes);
        let len = cut.index(bytes.len() + 1);
        let _ = wire::decode_message(&bytes[..len]);
    }

    #[test]
    fn decoded_mutations_reencode_stably(
        m in message(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..4),
    ) {
        let mut bytes = m.to_bytes().unwrap();
        for (at, value) in flips {
            let i = at.index(bytes.len());
            bytes[i] = value;
        }
        if let Ok(decoded) = wire::decode_message(&bytes) {
            if let Ok(b1) = decoded.to_bytes() {
                prop_assert_eq!(wire::decode_message(&b1).unwrap(), decoded);
            }
        }
    }
}

// www.example.com A response with the answer name and CNAME target compressed.
fn compressed_response() -> Vec<u8> {
    let mut b = vec![0x12, 0x34, 0x81, 0x80, 0, 1, 0, 2, 0, 0, 0, 0];
    b.extend_from_slice(b"\x03www\x07example\x03com\x00\x00\x01\x00\x01");
    // www.example.com CNAME cdn.example.com
    b.extend_from_slice(&[0xc0, 12, 0, 5, 0, 1, 0, 0, 0, 60, 0, 6]);
    b.extend_from_slice(b"\x03cdn\xc0\x10");
    // cdn.example.com A 192.0.2.1
    b.extend_from_slice(&[0xc0, 45, 0, 1, 0, 1, 0, 0, 0, 60, 0, 4, 192, 0, 2, 1]);
    b
}

#[test]
fn compressed_names_are_expanded() {
    let m = wire::decode_message(&compressed_response()).unwrap();
    assert_eq!(m.answers[0].name, "www.example.com");
    assert_eq!(m.answers[0].data, RData::Cname("cdn.example.com".into()));
    assert_eq!(m.answers[1].name, "cdn.example.com");
    assert_eq!(m.answers[1].data, RData::A("192.0.2.1".parse().unwrap()));
    let again = wire::decode_message(&m.to_bytes().unwrap()).unwrap();
    assert_eq!(again, m);
}

#[test]
fn self_pointer_is_rejected() {
    let mut b = vec![0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0];
    b.extend_from_slice(&[0xc0, 12, 0, 1, 0, 1]);
    assert!(matches!(wire::decode_message(&b), Err(WireError::PointerLoop { .. })));
}

#[test]
fn every_prefix_of_a_valid_message_fails_cleanly() {
    let full = compressed_response();
    for len in 0..full.len() {
        assert!(wire::decode_message(&full[..len]).is_err(), "prefix {len}");
    }
}

#[test]
fn escaped_labels_survive() {
    let m = wire::DnsMessage::query("a\\.b.c\\092d.\\000x.example", wire::TYPE_TXT, 1, true);
    let decoded = wire::decode_message(&m.to_bytes().unwrap()).unwrap();
    assert_eq!(
        wire::name_to_labels(&decoded.question.name).unwrap(),
        vec![b"a.b".to_vec(), b"c\\d".to_vec(), b"\0x".to_vec(), b"example".to_vec()]
    );
}

#[test]
fn trailing_escaped_dot_is_part_of_the_label() {
    assert_eq!(wire::name_to_labels("a\\.").unwrap(), vec![b"a.".to_vec()]);
    assert_eq!(wire::name_to_labels("\\.").unwrap(), vec![b".".to_vec()]);
    assert_eq!(wire::name_to_labels("a\\\\.").unwrap(), vec![b"a\\".to_vec()]);
    let m = wire::DnsMessage::query("x.\\046", wire::TYPE_A, 1, true);
    let decoded = wire::decode_message(&m.to_bytes().unwrap()).unwrap();
    assert_eq!(decoded.question.name, "x.\\.");
    assert_eq!(decoded.to_bytes().unwrap(), m.to_bytes().unwrap());
}
