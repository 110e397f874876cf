use crudmem::protocol::{parse, render, ActionSequence, MemoryAction, SchemaVariant};
use proptest::prelude::*;

fn payload() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 ,.;:'!?()-]{1,40}".prop_filter_map("blank", |s| {
        let t = s.trim().to_string();
        (!t.is_empty()).then_some(t)
    })
}

fn action() -> impl Strategy<Value = MemoryAction> {
    prop_oneof![
        payload().prop_map(|content| MemoryAction::Create { content }),
        payload().prop_map(|query| MemoryAction::Read { query }),
        (0u64..10_000, payload()).prop_map(|(id, content)| MemoryAction::Update { id, content }),
        (0u64..10_000).prop_map(|id| MemoryAction::Delete { id }),
        prop_oneof![Just(String::new()), payload()]
            .prop_map(|content| MemoryAction::Scratchpad { content }),
    ]
}

fn sequence() -> impl Strategy<Value = ActionSequence> {
    (
        prop::collection::vec(action(), 0..12),
        prop::option::of(payload()),
    )
        .prop_map(|(actions, answer)| {
            let mut seq = ActionSequence::from_actions(actions);
            seq.final_answer = answer;
            seq
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]
    #[test]
    fn render_parse_round_trip(seq in sequence()) {
        for schema in [SchemaVariant::Table, SchemaVariant::Prompt] {
            let text = render(&seq, schema).unwrap();
            let back = parse(&text, schema);
            prop_assert_eq!(&back, &seq, "schema {:?}\n{}", schema, text);
        }
    }

    #[test]
    fn parse_never_panics(text in "(<[/a-z_ ]{0,16}>|[a-z0-9: ]{0,8}){0,20}") {
        for schema in [SchemaVariant::Table, SchemaVariant::Prompt] {
            let _ = parse(&text, schema);
        }
    }
}
