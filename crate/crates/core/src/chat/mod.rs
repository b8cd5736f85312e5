//! Interactive access to trained models: per-session conversation state,
//! persona selection, a line-oriented REPL and an HTTP service.

mod http;
mod repl;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{is_name_token, normalize, Vocabulary, EOS, EOS_ID};
use crate::decoding::{beam_search, decode, mmi_rerank, DecodeSettings};
use crate::error::{Error, Result};
use crate::transformer::{Transformer, TransformerConfig};

pub use http::{router, serve};
pub use repl::run_repl;

/// A model ready to answer, with an optional backward model for reranking.
#[derive(Debug)]
pub struct LoadedModel {
    pub id: String,
    pub model: Transformer,
    pub vocab: Vocabulary,
    pub backward: Option<Transformer>,
}

impl LoadedModel {
    pub fn new(id: impl Into<String>, model: Transformer, vocab: Vocabulary) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::Config(format!(
                "model expects {} tokens but the vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            model,
            vocab,
            backward: None,
        })
    }

    pub fn from_checkpoint(id: impl Into<String>, ckpt: &Checkpoint) -> Result<Self> {
        Self::new(id, ckpt.model()?, ckpt.vocab.clone())
    }

    pub fn with_backward(mut self, backward: Transformer) -> Result<Self> {
        if backward.vocab_size() != self.vocab.len() {
            return Err(Error::Config(
                "backward model vocabulary differs from the forward one".into(),
            ));
        }
        self.backward = Some(backward);
        Ok(self)
    }

    pub fn config(&self) -> &TransformerConfig {
        self.model.config()
    }

    /// Name tokens, `<UNK_NAME>` included, in vocabulary order.
    pub fn personas(&self) -> Vec<String> {
        self.vocab
            .name_tokens()
            .into_iter()
            .map(str::to_owned)
            .collect()
    }

    fn check_persona(&self, token: &Option<String>) -> Result<()> {
        match token {
            Some(t) if !(is_name_token(t) && self.vocab.contains(t)) => {
                Err(Error::Persona(t.clone()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionOptions {
    pub speaker: Option<String>,
    pub addressee: Option<String>,
    pub settings: DecodeSettings,
    /// Earlier utterances prepended to the source, joined by `<EOS>`.
    pub history_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSession {
    pub id: String,
    pub model: String,
    pub history: Vec<Turn>,
    pub speaker: Option<String>,
    pub addressee: Option<String>,
    pub settings: DecodeSettings,
    pub history_window: usize,
}

impl ChatSession {
    pub fn new(
        id: impl Into<String>,
        model: &LoadedModel,
        options: SessionOptions,
    ) -> Result<Self> {
        model.check_persona(&options.speaker)?;
        model.check_persona(&options.addressee)?;
        options.settings.validate()?;
        if options.settings.mmi_lambda.is_some() && model.backward.is_none() {
            return Err(Error::Config(format!(
                "model {} has no backward model for reranking",
                model.id
            )));
        }
        Ok(Self {
            id: id.into(),
            model: model.id.clone(),
            history: Vec::new(),
            speaker: options.speaker,
            addressee: options.addressee,
            settings: options.settings,
            history_window: options.history_window,
        })
    }

    /// Source ids for `utterance` in the training layout: optional history,
    /// then `[speaker] words [addressee] <EOS>`, trimmed from the oldest
    /// words to fit the model.
    pub fn encode_source(&self, model: &LoadedModel, utterance: &str) -> Result<Vec<u32>> {
        let words = normalize(utterance);
        if words.is_empty() {
            return Err(Error::Input("utterance is empty after cleaning".into()));
        }
        let mut body: Vec<String> = Vec::new();
        let start = self.history.len().saturating_sub(self.history_window);
        for turn in &self.history[start..] {
            body.extend(turn.text.split_whitespace().map(str::to_owned));
            body.push(EOS.to_owned());
        }
        body.extend(words);
        let fixed = 1 + usize::from(self.speaker.is_some()) + usize::from(self.addressee.is_some());
        let room = model
            .config()
            .max_sequence_length
            .saturating_sub(fixed)
            .max(1);
        let body = &body[body.len().saturating_sub(room)..];
        let mut tokens: Vec<&str> = Vec::with_capacity(body.len() + 2);
        tokens.extend(self.speaker.as_deref());
        tokens.extend(body.iter().map(String::as_str));
        tokens.extend(self.addressee.as_deref());
        Ok(model.vocab.encode(&tokens))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub reply: String,
    pub token_ids: Vec<u32>,
    pub score: f64,
}

/// Answers one user turn and appends both turns to the session history.
pub fn respond(model: &LoadedModel, session: &mut ChatSession, utterance: &str) -> Result<Reply> {
    if session.model != model.id {
        return Err(Error::Contract(format!(
            "session belongs to model {}, not {}",
            session.model, model.id
        )));
    }
    let source = session.encode_source(model, utterance)?;
    let settings = &session.settings;
    let best = match (settings.mmi_lambda, &model.backward) {
        (Some(lambda), Some(backward)) => {
            let candidates = beam_search(&model.model, &source, settings)?;
            let mut ranked = mmi_rerank(&model.model, backward, &source, &candidates, lambda)?;
            ranked.swap_remove(0).hypothesis
        }
        (Some(_), None) => return Err(Error::Config("no backward model loaded".into())),
        (None, _) => decode(&model.model, &source, settings)?,
    };
    let reply = model.vocab.decode(&best.tokens)?.join(" ");
    let user = normalize(utterance).join(" ");
    session.history.push(Turn {
        role: Role::User,
        text: user,
    });
    session.history.push(Turn {
        role: Role::Bot,
        text: reply.clone(),
    });
    let mut token_ids = best.tokens;
    if token_ids.last() == Some(&EOS_ID) {
        token_ids.pop();
    }
    Ok(Reply {
        reply,
        token_ids,
        score: best.score,
    })
}

type SessionCell = Arc<tokio::sync::Mutex<ChatSession>>;

/// Read-only models plus session table. Each session sits behind a fair
/// async mutex, so requests to one session run one at a time in arrival
/// order while different sessions proceed independently.
#[derive(Debug)]
pub struct ChatService {
    models: BTreeMap<String, Arc<LoadedModel>>,
    sessions: Mutex<HashMap<String, SessionCell>>,
}

impl ChatService {
    pub fn new(models: Vec<LoadedModel>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(Error::Config(format!("model id {id} given twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::Config("no models to serve".into()));
        }
        Ok(Self {
            models: map,
            sessions: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self, id: &str) -> Result<Arc<LoadedModel>> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("model {id}")))
    }

    pub fn models(&self) -> impl Iterator<Item = &Arc<LoadedModel>> {
        self.models.values()
    }

    pub fn personas(&self, model: &str) -> Result<Vec<String>> {
        Ok(self.model(model)?.personas())
    }

    pub fn create_session(&self, model: &str, options: SessionOptions) -> Result<String> {
        let m = self.model(model)?;
        let id = uuid::Uuid::new_v4().to_string();
        let session = ChatSession::new(id.clone(), &m, options)?;
        self.lock_sessions()
            .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
        Ok(id)
    }

    fn lock_sessions(&self) -> std::sync::MutexGuard<'_, HashMap<String, SessionCell>> {
        // A panic while holding this lock cannot leave the map half-updated.
        self.sessions.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn session(&self, id: &str) -> Result<SessionCell> {
        self.lock_sessions()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    /// Copy of a session's current state.
    pub async fn snapshot(&self, id: &str) -> Result<ChatSession> {
        Ok(self.session(id)?.lock().await.clone())
    }

    /// Runs [`respond`] for the session on the blocking pool.
    pub async fn chat(&self, session_id: &str, utterance: String) -> Result<Reply> {
        let mut guard = self.session(session_id)?.lock_owned().await;
        let model = self.model(&guard.model)?;
        tokio::task::spawn_blocking(move || respond(&model, &mut guard, &utterance))
            .await
            .map_err(|e| Error::Contract(format!("decoding task failed: {e}")))?
    }
}
