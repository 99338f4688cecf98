//! Seeded model of an agent regenerating its tool calls after a restore.
//!
//! Reference ids come out fresh on every generation, free text is re-phrased
//! from a fixed synonym table with probability `text_jitter`, and intent
//! fields stay put unless an `intent_mutation` redirects them.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Redirects one argument of one tool on every post-restore generation.
/// Trial `n` uses `values[n % values.len()]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentMutation {
    pub tool: String,
    pub path: String,
    pub values: Vec<Value>,
}

impl IntentMutation {
    pub fn value_for(&self, trial: u64) -> Option<&Value> {
        if self.values.is_empty() {
            return None;
        }
        self.values.get((trial % self.values.len() as u64) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResynthesisModel {
    #[serde(default = "yes")]
    pub fresh_reference_ids: bool,
    #[serde(default)]
    pub text_jitter: f64,
    #[serde(default)]
    pub intent_mutation: Option<IntentMutation>,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for ResynthesisModel {
    fn default() -> Self {
        Self {
            fresh_reference_ids: true,
            text_jitter: 0.0,
            intent_mutation: None,
            seed: 0,
        }
    }
}

const SYNONYMS: &[(&str, &[&str])] = &[
    (
        "memo",
        &[
            "Payment for invoice 1042",
            "Invoice 1042 payment",
            "Paying invoice #1042",
            "Settlement of invoice 1042",
            "Transfer for invoice no. 1042",
        ],
    ),
    (
        "reason",
        &[
            "GDPR erasure request",
            "Customer requested data deletion under GDPR",
            "Right-to-erasure request",
            "Data removal per GDPR article 17",
        ],
    ),
    (
        "note",
        &[
            "Provision web tier",
            "Provisioning the web tier",
            "Create server for the web tier",
        ],
    ),
];

/// Phrasings available for a `$text:` key; unknown keys render as the key.
pub fn phrasings(key: &str) -> Option<&'static [&'static str]> {
    SYNONYMS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

/// Stateful generator for one trial.
pub struct Resynthesizer {
    model: ResynthesisModel,
    rng: ChaCha8Rng,
    issued: HashSet<String>,
    pinned: BTreeMap<String, String>,
}

impl Resynthesizer {
    pub fn new(model: ResynthesisModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        Self {
            model,
            rng,
            issued: HashSet::new(),
            pinned: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &ResynthesisModel {
        &self.model
    }

    fn new_uuid(&mut self) -> String {
        loop {
            let bytes: [u8; 16] = self.rng.gen();
            let id = uuid::Builder::from_random_bytes(bytes).into_uuid().to_string();
            if self.issued.insert(id.clone()) {
                return id;
            }
        }
    }

    /// A reference id for `slot` (a step/argument position). Fresh on every
    /// call unless the model pins reference ids.
    pub fn reference_id(&mut self, slot: &str) -> String {
        if !self.model.fresh_reference_ids {
            if let Some(id) = self.pinned.get(slot) {
                return id.clone();
            }
        }
        let id = self.new_uuid();
        self.pinned.insert(slot.to_owned(), id.clone());
        id
    }

    /// Free text for `key`. Generation 0 uses the canonical phrasing; later
    /// generations re-phrase with probability `text_jitter`.
    pub fn text(&mut self, key: &str, generation: u32) -> String {
        let Some(options) = phrasings(key) else {
            return key.to_owned();
        };
        // Always draw so the stream does not depend on the jitter setting.
        let roll: f64 = self.rng.gen();
        let pick = self.rng.gen_range(1..options.len());
        if generation > 0 && roll < self.model.text_jitter {
            options[pick].to_owned()
        } else {
            options[0].to_owned()
        }
    }

    /// The mutated value for `tool` on generation `generation`, if any.
    pub fn mutation(&self, tool: &str, generation: u32, trial: u64) -> Option<(&str, &Value)> {
        let m = self.model.intent_mutation.as_ref()?;
        if generation == 0 || m.tool != tool {
            return None;
        }
        m.value_for(trial).map(|v| (m.path.as_str(), v))
    }
}
