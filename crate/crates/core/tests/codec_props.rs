use fedorch::metrics::ConfusionCounts;
use fedorch::proto::{
    decode_frame, decode_frame_capped, encode_frame, encode_frame_capped, FrameDecoder, Message, MsgType, NodeEval,
    ProtoError, ResumeDecision, RoundResult, RoundStart, TextMap, DEFAULT_MAX_PAYLOAD,
};
use fedorch::tensor::{deserialize, serialize, Tensor, TensorMap};
use proptest::prelude::*;

const ALL_TYPES: [MsgType; 12] = [
    MsgType::Hello,
    MsgType::Challenge,
    MsgType::AuthProof,
    MsgType::JoinAck,
    MsgType::RoundStart,
    MsgType::RoundResult,
    MsgType::RoundAck,
    MsgType::Heartbeat,
    MsgType::ResumeReq,
    MsgType::ResumeState,
    MsgType::Error,
    MsgType::Shutdown,
];

fn tensor_maps() -> impl Strategy<Value = TensorMap> {
    prop::collection::vec(("[a-z][a-z0-9_.]{0,12}", prop::collection::vec(1usize..6, 0..4)), 0..5)
        .prop_flat_map(|specs| {
            let lens: Vec<usize> = specs.iter().map(|(_, s)| s.iter().product()).collect();
            let data = lens
                .iter()
                .map(|&n| {
                    prop::collection::vec(
                        prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                        n,
                    )
                })
                .collect::<Vec<_>>();
            (Just(specs), data)
        })
        .prop_map(|(specs, data)| {
            let mut map = TensorMap::new();
            for (i, ((name, shape), values)) in specs.into_iter().zip(data).enumerate() {
                let _ = map.push(Tensor::new(format!("{name}{i}"), shape, values).unwrap());
            }
            map
        })
}

fn small_model() -> impl Strategy<Value = TensorMap> {
    prop::collection::vec(-5.0f32..5.0, 1..20)
        .prop_map(|v| TensorMap::from_entries(vec![Tensor::new("w0", vec![v.len(), 1], v).unwrap()]).unwrap())
}

fn messages() -> impl Strategy<Value = Message> {
    let node = "[a-z][a-z0-9_-]{0,15}";
    let text = "[ -~]{0,40}";
    let counts =
        (0u64..500, 0u64..500, 0u64..500, 0u64..500).prop_map(|(tp, fp, tn, fn_)| ConfusionCounts { tp, fp, tn, fn_ });
    let eval = prop::option::of(
        (counts, prop::option::of(0.0f64..=1.0)).prop_map(|(counts, roc_auc)| NodeEval { counts, roc_auc }),
    );
    prop_oneof![
        node.prop_map(|node_id| Message::Hello { node_id }),
        any::<[u8; 32]>().prop_map(|nonce| Message::Challenge { nonce }),
        (node, any::<[u8; 32]>()).prop_map(|(node_id, proof)| Message::AuthProof { node_id, proof }),
        (node, any::<bool>()).prop_map(|(node_id, approved)| Message::JoinAck { node_id, approved }),
        (1u32..100, 1u32..100, 1u32..50, 0u32..100, small_model()).prop_map(
            |(round, total_rounds, epochs, acked_round, model)| {
                Message::RoundStart(RoundStart {
                    round,
                    total_rounds,
                    epochs,
                    acked_round,
                    model,
                })
            }
        ),
        (
            1u32..100,
            node,
            1u64..10_000,
            1u32..50,
            0.0f64..10.0,
            0.0f64..10.0,
            eval,
            small_model()
        )
            .prop_map(
                |(round, node_id, sample_count, epochs, train_loss, val_loss, eval, model)| {
                    Message::RoundResult(RoundResult {
                        round,
                        node_id,
                        sample_count,
                        epochs,
                        train_loss,
                        val_loss,
                        eval,
                        model,
                    })
                }
            ),
        (0u32..100).prop_map(|round| Message::RoundAck { round }),
        Just(Message::Heartbeat),
        (prop::option::of(any::<[u8; 16]>()), 0u32..100).prop_map(|(session_id, last_acked_round)| {
            Message::ResumeReq {
                session_id,
                last_acked_round,
            }
        }),
        (
            prop_oneof![
                Just(ResumeDecision::Deliver),
                Just(ResumeDecision::Wait),
                Just(ResumeDecision::Done),
                Just(ResumeDecision::Rejoin)
            ],
            prop::option::of(any::<[u8; 16]>()),
            0u32..100,
            0u32..100
        )
            .prop_map(|(decision, session_id, round, acked_round)| Message::ResumeState {
                decision,
                session_id,
                round,
                acked_round
            }),
        ("[a-z_]{1,20}", text).prop_map(|(code, message)| Message::Error { code, message }),
        text.prop_map(|reason| Message::Shutdown { reason }),
    ]
}

proptest! {
    #[test]
    fn tensor_map_round_trips(map in tensor_maps()) {
        let bytes = serialize(&map);
        let back = deserialize(&bytes).unwrap();
        prop_assert!(back.bit_eq(&map));
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn truncated_tensor_encoding_is_rejected(map in tensor_maps(), cut in 1usize..64) {
        let bytes = serialize(&map);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(deserialize(&bytes[..keep]).is_err());
    }

    #[test]
    fn frames_round_trip(t in 0usize..12, payload in prop::collection::vec(any::<u8>(), 0..4096)) {
        let bytes = encode_frame(ALL_TYPES[t], &payload).unwrap();
        prop_assert_eq!(bytes.len(), payload.len() + 5);
        let (frame, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(frame.msg_type, ALL_TYPES[t]);
        prop_assert_eq!(frame.payload, payload);
    }

    #[test]
    fn stream_decoder_handles_any_chunking(
        payloads in prop::collection::vec((0usize..12, prop::collection::vec(any::<u8>(), 0..300)), 1..8),
        chunk in 1usize..97,
    ) {
        let mut stream = Vec::new();
        for (t, p) in &payloads {
            stream.extend(encode_frame(ALL_TYPES[*t], p).unwrap());
        }
        let mut dec = FrameDecoder::new(DEFAULT_MAX_PAYLOAD);
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            dec.push(piece);
            while let Some(f) = dec.next_frame().unwrap() {
                got.push(f);
            }
        }
        prop_assert_eq!(dec.buffered(), 0);
        prop_assert_eq!(got.len(), payloads.len());
        for (f, (t, p)) in got.iter().zip(&payloads) {
            prop_assert_eq!(f.msg_type, ALL_TYPES[*t]);
            prop_assert_eq!(&f.payload, p);
        }
    }

    #[test]
    fn messages_round_trip(msg in messages()) {
        let bytes = msg.encode().unwrap();
        prop_assert_eq!(Message::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn text_maps_are_canonical(pairs in prop::collection::btree_map("[a-z_]{1,10}", "[ -~]{0,20}", 0..10)) {
        let mut m = TextMap::new();
        for (k, v) in pairs.iter().rev() {
            m.set(k, v);
        }
        let bytes = m.encode();
        prop_assert_eq!(TextMap::decode(&bytes).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn megabyte_frames_round_trip(len in 0usize..=(1 << 20), byte in any::<u8>(), t in 0usize..12) {
        let payload: Vec<u8> = (0..len).map(|i| byte.wrapping_add(i as u8)).collect();
        let bytes = encode_frame(ALL_TYPES[t], &payload).unwrap();
        let (frame, _) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(frame.payload, payload);
    }
}

#[test]
fn oversize_and_unknown_frames_are_rejected() {
    assert!(matches!(
        encode_frame_capped(MsgType::Hello, &[0; 11], 10),
        Err(ProtoError::Oversize { len: 11, cap: 10 })
    ));
    let mut header = (DEFAULT_MAX_PAYLOAD as u32 + 1).to_be_bytes().to_vec();
    header.push(MsgType::Hello as u8);
    assert!(matches!(decode_frame(&header), Err(ProtoError::Oversize { .. })));
    let bytes = encode_frame(MsgType::Hello, b"abc").unwrap();
    assert!(matches!(
        decode_frame_capped(&bytes, 2),
        Err(ProtoError::Oversize { .. })
    ));
    let mut unknown = bytes.clone();
    unknown[4] = 0x7f;
    assert_eq!(decode_frame(&unknown), Err(ProtoError::UnknownType(0x7f)));
    assert_eq!(decode_frame(&bytes[..6]), Err(ProtoError::Truncated));
}

#[test]
fn canonical_text_rejects_out_of_order_keys() {
    assert!(TextMap::decode(b"b=1\na=2\n").is_err());
    assert!(TextMap::decode(b"a=1\na=2\n").is_err());
    assert!(TextMap::decode(b"a=1").is_err());
}
