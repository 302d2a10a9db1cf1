use mirg_core::grammar::{
    check_format, extract_groundings, find_reserved, parse_trajectory, serialize_trajectory, Block, ObjectMention, ParseErrorKind,
    Trajectory,
};
use mirg_core::types::{BoundingBox, GroundedObject, PositionId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
enum Step {
    Text(String),
    Introduce { n: u32, k: u32, desc: String, coords: [f64; 4] },
    Refer(usize),
}

fn clean_text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.:;!?<>|/_\\-\\[\\]()\n\t]{1,24}".prop_filter("no reserved tokens", |s| find_reserved(s).is_none())
}

fn coordinate() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..2000).prop_map(f64::from),
        (0u32..200_000).prop_map(|v| f64::from(v) / 100.0),
        0.0f64..1e6,
    ]
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        3 => clean_text().prop_map(Step::Text),
        2 => (1u32..5, 1u32..5, clean_text().prop_filter("non-blank", |d| !d.trim().is_empty()), [coordinate(), coordinate(), coordinate(), coordinate()])
            .prop_map(|(n, k, desc, coords)| Step::Introduce { n, k, desc, coords }),
        1 => (0usize..8).prop_map(Step::Refer),
    ]
}

/// Builds a valid trajectory: ids are introduced once and referenced only afterwards.
fn build(think: &[Step], answer: &[Step]) -> Trajectory {
    let mut introduced: Vec<PositionId> = Vec::new();
    let mut block_of = |steps: &[Step]| {
        let mut block = Block::new();
        for step in steps {
            match step {
                Step::Text(t) => block.push_text(t),
                Step::Introduce { n, k, desc, coords } => {
                    let id = PositionId::new(*n, *k).unwrap();
                    if introduced.contains(&id) {
                        block.push_mention(ObjectMention::BackReference(id));
                        continue;
                    }
                    let [a, b, c, d] = *coords;
                    let bbox = BoundingBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap();
                    block.push_mention(ObjectMention::Full(GroundedObject::new(id, desc.clone(), bbox).unwrap()));
                    introduced.push(id);
                }
                Step::Refer(i) => {
                    if let Some(id) = introduced.get(*i % introduced.len().max(1)) {
                        block.push_mention(ObjectMention::BackReference(*id));
                    }
                }
            }
        }
        block
    };
    let think = block_of(think);
    let answer = block_of(answer);
    Trajectory::new(think, answer)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn serialize_then_parse_is_identity(
        think in prop::collection::vec(step(), 0..8),
        answer in prop::collection::vec(step(), 0..8),
    ) {
        let t = build(&think, &answer);
        let text = serialize_trajectory(&t).unwrap();
        prop_assert_eq!(parse_trajectory(&text).unwrap(), t.clone());
        // canonical text is a fixed point
        prop_assert_eq!(serialize_trajectory(&parse_trajectory(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn outer_whitespace_is_ignored(ws1 in "[ \t\n]{0,4}", ws2 in "[ \t\n]{0,4}", answer in prop::collection::vec(step(), 0..5)) {
        let t = build(&[], &answer);
        let text = serialize_trajectory(&t).unwrap();
        prop_assert_eq!(parse_trajectory(&format!("{ws1}{text}{ws2}")).unwrap(), t);
    }

    #[test]
    fn arbitrary_strings_never_panic(s in "\\PC{0,200}") {
        let _ = parse_trajectory(&s);
    }
}

const TOKENS: [&str; 10] = [
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "<bbox_id>",
    "</bbox_id>",
    "<|object_ref_start|>",
    "<|object_ref_end|>",
    "<|box_start|>",
    "<|box_end|>",
];

#[test]
fn random_bytes_and_token_soup_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pieces = ["[1-1]", "[2-3]", "(1,2),(3,4)", "(1.5,2),(3,4.25)", "red cup", ",", "(", ")", "-", "0", " "];
    for _ in 0..10_000 {
        let len = rng.random_range(0..256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_trajectory(&text);

        let mut soup = String::new();
        for _ in 0..rng.random_range(0..24) {
            if rng.random_bool(0.5) {
                soup.push_str(TOKENS[rng.random_range(0..TOKENS.len())]);
            } else {
                soup.push_str(pieces[rng.random_range(0..pieces.len())]);
            }
        }
        if let Ok(t) = parse_trajectory(&soup) {
            // anything accepted must survive a round trip
            assert_eq!(parse_trajectory(&serialize_trajectory(&t).unwrap()).unwrap(), t);
        }
    }
}

#[test]
fn truncations_of_a_valid_trajectory_are_rejected_cleanly() {
    let text = "<think>I see <bbox_id>[1-1]</bbox_id><|object_ref_start|>red cup<|object_ref_end|><|box_start|>(10,20),(30,40)<|box_end|></think><answer><bbox_id>[1-1]</bbox_id></answer>";
    assert!(check_format(text));
    for cut in 0..text.len() {
        if text.is_char_boundary(cut) {
            assert!(!check_format(&text[..cut]), "prefix of length {cut} accepted");
        }
    }
}

#[test]
fn documented_examples() {
    let ok = "<think>I see <bbox_id>[1-1]</bbox_id><|object_ref_start|>red cup<|object_ref_end|><|box_start|>(10,20),(30,40)<|box_end|></think><answer><bbox_id>[1-1]</bbox_id></answer>";
    let t = parse_trajectory(ok).unwrap();
    assert_eq!(t.full_mentions().count(), 1);
    let g = extract_groundings(&t);
    assert_eq!(g.len(), 1);
    assert_eq!(g[0].bbox.to_array(), [10.0, 20.0, 30.0, 40.0]);

    let kind = |s: &str| parse_trajectory(s).unwrap_err().kind;
    assert_eq!(kind("<answer>x</answer>"), ParseErrorKind::MissingEnvelope);
    assert_eq!(kind("<think>t</think><answer><bbox_id>[1-1</bbox_id></answer>"), ParseErrorKind::MalformedMention);
    assert_eq!(kind("<think>t</think><answer><bbox_id>[2-1]</bbox_id></answer>"), ParseErrorKind::DanglingReference);
    assert_eq!(
        kind("<think>t</think><answer><bbox_id>[1-1]</bbox_id><|object_ref_start|>a<|object_ref_end|><|box_start|>(1,2),(x,4)<|box_end|></answer>"),
        ParseErrorKind::BadCoordinates
    );
    let twice = "<bbox_id>[1-1]</bbox_id><|object_ref_start|>a<|object_ref_end|><|box_start|>(1,2),(3,4)<|box_end|>";
    assert_eq!(kind(&format!("<think>{twice}{twice}</think><answer></answer>")), ParseErrorKind::DuplicateId);
}
