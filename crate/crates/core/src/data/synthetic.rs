//! Seeded generator of small movie-dialog corpora in the Cornell file
//! format, for tests and offline experiments. Replies follow a fixed
//! template graph and partly copy slot values from the previous turn, so
//! they are learnable but not fully predictable.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cornell::SEPARATOR;

const TEMPLATES: &[(&str, &[usize])] = &[
    ("Hello, {name}.", &[1, 2]),
    ("Hi! How are you?", &[3, 4]),
    ("Oh, it's you again.", &[5, 4]),
    ("I'm fine, thanks. And you?", &[6, 7]),
    ("Not so good. I lost my {noun}.", &[8, 9]),
    ("What do you want?", &[10, 11]),
    ("I'm great. I just got back from the {place}.", &[12, 13]),
    ("Don't ask.", &[5, 14]),
    ("Where did you see your {noun} last?", &[15, 16]),
    ("Did you check the {place}?", &[17, 15]),
    ("I want to talk about the {noun}.", &[18, 19]),
    ("Nothing. Forget it.", &[14, 2]),
    ("What were you doing at the {place}?", &[20, 21]),
    (
        "The {place}? I haven't been there in {num} years.",
        &[22, 23],
    ),
    ("Fine, I won't.", &[]),
    ("I think it was in the {place}.", &[24, 9]),
    ("I can't remember.", &[25, 9]),
    ("Yes, twice. It isn't there.", &[26, 25]),
    ("What about the {noun}?", &[27, 28]),
    ("I'm not talking about the {noun} with you.", &[11, 29]),
    ("I was looking for {name}.", &[30, 31]),
    ("Eating {food} with {name}.", &[32, 33]),
    ("You should go. It's {adj}.", &[34, 35]),
    ("Why not?", &[36, 11]),
    ("Then let's go to the {place} now.", &[35, 37]),
    ("Well, I'll help you look for the {noun}.", &[38, 14]),
    ("Then someone took my {noun}.", &[39, 40]),
    ("It's {adj}, that's what.", &[40, 18]),
    ("You know what I mean.", &[16, 41]),
    ("Why won't you?", &[36, 11]),
    ("{name} left at {num} o'clock.", &[42, 16]),
    ("Did you find {name}?", &[43, 16]),
    ("Do you like {food}?", &[44, 45]),
    ("That sounds {adj}.", &[46, 14]),
    ("Maybe I will.", &[]),
    ("I'll go to the {place} tomorrow.", &[47, 34]),
    ("Because I'm busy.", &[48, 14]),
    ("Now? It's too late.", &[35, 40]),
    ("Thanks. You're a good friend.", &[49]),
    ("Who would take my {noun}?", &[50, 16]),
    ("Whatever you say.", &[]),
    ("No, I don't.", &[28, 11]),
    ("Where did {name} go?", &[15, 16]),
    ("No. Nobody has seen {name}.", &[40, 26]),
    ("I love {food}.", &[33, 46]),
    ("Not really. I'd rather have {food}.", &[33, 40]),
    ("It is.", &[]),
    ("Good. Call me when you get to the {place}.", &[34]),
    ("You're always busy.", &[41, 40]),
    ("Don't mention it.", &[]),
    ("Maybe {name} took it.", &[30, 40]),
];

const OPENERS: &[usize] = &[0, 4, 10, 12, 20, 32, 39, 13, 5, 2];

const SLOTS: &[(&str, &[&str])] = &[
    (
        "noun",
        &[
            "keys", "wallet", "dog", "car", "ring", "letter", "phone", "hat", "book", "camera",
            "bag", "watch",
        ],
    ),
    (
        "place",
        &[
            "kitchen", "office", "garden", "station", "library", "bar", "hotel", "beach", "church",
            "school", "park", "attic",
        ],
    ),
    (
        "food",
        &[
            "pizza", "pie", "soup", "steak", "coffee", "tea", "cake", "fish", "eggs", "pasta",
        ],
    ),
    (
        "num",
        &[
            "two", "three", "four", "five", "six", "ten", "twelve", "3", "7",
        ],
    ),
    (
        "adj",
        &[
            "great",
            "awful",
            "strange",
            "beautiful",
            "boring",
            "crazy",
            "wonderful",
            "terrible",
        ],
    ),
];

const CHARACTERS: &[&str] = &[
    "BIANCA",
    "CAMERON",
    "KAT",
    "PATRICK",
    "JOEY",
    "MICHAEL",
    "BEN",
    "ELAINE",
    "MRS. ROBINSON",
    "MR. BRADDOCK",
    "ROSE",
    "JACK",
    "RICK",
    "ILSA",
    "SAM",
    "VICTOR",
    "LUKE",
    "LEIA",
    "HAN",
    "MARTY",
    "DOC",
    "LORRAINE",
    "GEORGE",
    "BIFF",
    "ELLEN",
    "RIPLEY",
    "DALLAS",
    "KANE",
    "ASH",
    "PARKER",
];

/// Probability that a slot takes a fresh value instead of the one already
/// used in the conversation.
const REDRAW: f64 = 0.35;

/// Contents of `movie_lines.txt` and `movie_conversations.txt`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub movie_lines: String,
    pub movie_conversations: String,
}

fn title_case(name: &str) -> String {
    name.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_string() + &c.as_str().to_lowercase(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn fill<R: Rng>(
    template: &str,
    state: &mut [String],
    cast_names: &[String],
    rng: &mut R,
) -> String {
    let mut out = template.to_string();
    for (k, (slot, pool)) in SLOTS.iter().enumerate() {
        let key = format!("{{{slot}}}");
        if out.contains(&key) {
            if state[k].is_empty() || rng.gen_bool(REDRAW) {
                state[k] = pool.choose(rng).expect("pool").to_string();
            }
            out = out.replace(&key, &state[k]);
        }
    }
    if out.contains("{name}") {
        let name = cast_names.choose(rng).expect("cast");
        out = out.replace("{name}", name);
    }
    out
}

/// Generates `conversations` conversations spread over movies of about
/// twenty conversations each.
pub fn generate(conversations: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let movies = conversations.div_ceil(20).max(1);
    let mut casts: Vec<Vec<(String, String)>> = Vec::with_capacity(movies);
    let mut next_char = 0;
    for _ in 0..movies {
        let size = rng.gen_range(2..=5);
        let cast = CHARACTERS
            .choose_multiple(&mut rng, size)
            .map(|n| {
                next_char += 1;
                (format!("u{}", next_char - 1), n.to_string())
            })
            .collect();
        casts.push(cast);
    }
    let mut lines = String::new();
    let mut convs = String::new();
    let mut next_line = 1;
    for c in 0..conversations {
        let movie = c * movies / conversations.max(1);
        let cast = &casts[movie];
        let pair: Vec<&(String, String)> = cast.choose_multiple(&mut rng, 2).collect();
        let addressed: Vec<String> = cast.iter().map(|(_, n)| title_case(n)).collect();
        let mut state = vec![String::new(); SLOTS.len()];
        let turns = rng.gen_range(2..=5);
        let mut template = *OPENERS.choose(&mut rng).expect("openers");
        let mut ids = Vec::new();
        for t in 0..turns {
            let (char_id, name) = pair[t % 2];
            let text = fill(TEMPLATES[template].0, &mut state, &addressed, &mut rng);
            let _ = writeln!(lines, "L{next_line}{SEPARATOR}{char_id}{SEPARATOR}m{movie}{SEPARATOR}{name}{SEPARATOR}{text}");
            ids.push(format!("'L{next_line}'"));
            next_line += 1;
            match TEMPLATES[template].1.choose(&mut rng) {
                Some(&n) => template = n,
                None => break,
            }
        }
        let _ = writeln!(
            convs,
            "{}{SEPARATOR}{}{SEPARATOR}m{movie}{SEPARATOR}[{}]",
            pair[0].0,
            pair[1].0,
            ids.join(", ")
        );
    }
    SyntheticCorpus {
        movie_lines: lines,
        movie_conversations: convs,
    }
}
