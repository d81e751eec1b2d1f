use debatebench::prompts::{AgentPrompt, Bindings, DebatePrompt, TemplateRegistry, SLOTS};
use debatebench::protocols::ProtocolKind;

#[test]
fn every_prompt_style_has_its_templates() {
    let reg = TemplateRegistry::builtin();
    let ids = AgentPrompt::ALL.iter().flat_map(|p| p.template_ids()).chain(DebatePrompt::ALL.iter().flat_map(|p| p.template_ids()));
    for id in ids {
        assert!(reg.contains(id), "missing template {id}");
    }
}

#[test]
fn every_template_renders_with_all_slots_bound() {
    let reg = TemplateRegistry::builtin();
    let bindings = SLOTS.iter().fold(Bindings::new(), |b, s| b.with(s, format!("<{s}>")));
    let ids: Vec<String> = reg.ids().map(str::to_string).collect();
    assert!(!ids.is_empty());
    for id in ids {
        let text = reg.render(&id, &bindings).unwrap();
        for slot in SLOTS {
            assert!(!text.contains(&format!("{{{slot}}}")), "{id} left {{{slot}}} unfilled");
        }
    }
}

#[test]
fn default_prompts_are_allowed_for_their_protocol() {
    for kind in ProtocolKind::ALL {
        let cfg = debatebench::protocols::ProtocolConfig::new(kind);
        assert!(cfg.validate().is_ok(), "{}", kind.name());
    }
}
