//! The capability matrix of the protocols and a way to read the same
//! features back off actual transcripts.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::ProtocolKind;
use crate::model::{ParticipantKind, Role, Transcript};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Features {
    pub flexible_round_numbers: bool,
    pub judge: bool,
    pub summarizer: bool,
    pub sequential_interactions: bool,
    pub multi_api_calls: bool,
    pub asymmetric_agents: bool,
}

impl Features {
    pub const NAMES: [&'static str; 6] = [
        "flexible_round_numbers",
        "judge",
        "summarizer",
        "sequential_interactions",
        "multi_api_calls",
        "asymmetric_agents",
    ];

    const fn of(bits: [bool; 6]) -> Self {
        Features {
            flexible_round_numbers: bits[0],
            judge: bits[1],
            summarizer: bits[2],
            sequential_interactions: bits[3],
            multi_api_calls: bits[4],
            asymmetric_agents: bits[5],
        }
    }

    pub fn as_array(&self) -> [bool; 6] {
        [
            self.flexible_round_numbers,
            self.judge,
            self.summarizer,
            self.sequential_interactions,
            self.multi_api_calls,
            self.asymmetric_agents,
        ]
    }
}

impl ProtocolKind {
    /// Published feature matrix of each system.
    pub fn features(self) -> Features {
        const T: bool = true;
        const F: bool = false;
        match self {
            ProtocolKind::MedpromptSubset => Features::of([F, F, F, T, T, F]),
            ProtocolKind::SocietyOfMinds => Features::of([T, F, F, T, T, F]),
            ProtocolKind::EnsembleRefinement => Features::of([F, T, T, T, T, F]),
            ProtocolKind::Chateval => Features::of([T, T, T, T, T, F]),
            ProtocolKind::SelfConsistency => Features::of([F, F, F, F, T, F]),
            ProtocolKind::SingleAgent => Features::of([F, F, F, F, F, F]),
            ProtocolKind::Spp => Features::of([T, F, F, T, F, T]),
            ProtocolKind::MultiPersona => Features::of([T, T, F, T, T, T]),
        }
    }
}

/// Features visible in a set of transcripts of one protocol, typically run
/// under several round settings:
///
/// * flexible round numbers: transcripts differ in their number of rounds;
/// * judge: a judge or aggregator participant exists;
/// * summarizer: a summarizer or aggregator participant exists;
/// * sequential interactions: some prompt quotes an earlier reply;
/// * multi API calls: some transcript made more than one call;
/// * asymmetric agents: answerers differ in system prompt or persona.
pub fn observed_features(transcripts: &[Transcript]) -> Features {
    let rounds: HashSet<usize> = transcripts.iter().map(|t| t.rounds.len()).collect();
    let kinds = |k: &[ParticipantKind]| transcripts.iter().any(|t| t.participants.iter().any(|p| k.contains(&p.kind)));
    let sequential = transcripts.iter().any(|t| {
        let msgs: Vec<_> = t.all_messages().collect();
        msgs.iter().enumerate().any(|(i, reply)| {
            reply.role == Role::Assistant
                && !reply.content.is_empty()
                && msgs[i + 1..].iter().any(|m| m.role == Role::User && m.content.contains(&reply.content))
        })
    });
    let asymmetric = transcripts.iter().any(|t| {
        let styles: HashSet<_> = t.answerers().map(|p| (p.system_digest.clone(), p.persona.clone())).collect();
        styles.len() > 1
    });
    Features {
        flexible_round_numbers: rounds.len() > 1,
        judge: kinds(&[ParticipantKind::Judge, ParticipantKind::Aggregator]),
        summarizer: kinds(&[ParticipantKind::Summarizer, ParticipantKind::Aggregator]),
        sequential_interactions: sequential,
        multi_api_calls: transcripts.iter().any(|t| t.api_calls > 1),
        asymmetric_agents: asymmetric,
    }
}
