//! Deterministic fixtures: a small end-to-end pipeline work set and a large
//! caption/image corpus with planted filter violations.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::PipelineConfig;
use crate::corpus::{CaptionRecord, DEFAULT_EXCLUDED_TYPES};
use crate::grounding::{KbEntity, KnowledgeSnapshot};
use crate::subjects::{rewrite_template, LlmFamily, PromptTemplate, RecordedLlmClient};
use crate::synthetic::{draw_face, flat_image, identity_texture, natural_image, noise_image};
use crate::Result;

/// News-style captions with hand-picked subject phrases.
pub const CAPTIONS: [(&str, &str, &[&str]); 40] = [
    (
        "Firefighters battle a blaze at a warehouse near the river",
        "Firefighters",
        &["blaze", "warehouse"],
    ),
    (
        "Farmers inspect crops damaged by the late frost",
        "Farmers",
        &["crops", "frost"],
    ),
    (
        "Commuters wait on a crowded platform after signal failures",
        "Commuters",
        &["platform"],
    ),
    (
        "Volunteers pack food parcels at the community hall",
        "Volunteers",
        &["food parcels"],
    ),
    (
        "A new bridge opens to traffic after years of delays",
        "bridge",
        &["traffic"],
    ),
    (
        "Fans celebrate after the home team wins the final",
        "Fans",
        &["team"],
    ),
    (
        "Fishing boats return to the harbour before the storm",
        "Fishing boats",
        &["harbour", "storm"],
    ),
    (
        "Students gather outside the school for a climate protest",
        "Students",
        &["school"],
    ),
    (
        "Workers repair a damaged power line in heavy snow",
        "Workers",
        &["power line", "snow"],
    ),
    (
        "Rescue dogs search the rubble after the earthquake",
        "Rescue dogs",
        &["rubble"],
    ),
    (
        "Shoppers queue outside the market on the opening day",
        "Shoppers",
        &["market"],
    ),
    (
        "Cyclists ride through the old town during the race",
        "Cyclists",
        &["old town"],
    ),
    (
        "Smoke rises over the hills as wildfires spread overnight",
        "Smoke",
        &["hills", "wildfires"],
    ),
    (
        "Residents clear mud from their homes after the flood",
        "Residents",
        &["mud", "homes"],
    ),
    (
        "A cargo ship waits outside the port during the strike",
        "cargo ship",
        &["port"],
    ),
    (
        "Miners leave the pit at the end of the last shift",
        "Miners",
        &["pit"],
    ),
    (
        "Tourists crowd the beach on the hottest day of the year",
        "Tourists",
        &["beach"],
    ),
    (
        "Doctors treat patients in a field hospital near the border",
        "Doctors",
        &["field hospital"],
    ),
    (
        "Engineers test a prototype train on the new line",
        "Engineers",
        &["prototype train"],
    ),
    (
        "Children play in the fountain as temperatures soar",
        "Children",
        &["fountain"],
    ),
    (
        "Police officers patrol the square ahead of the parade",
        "Police officers",
        &["square"],
    ),
    (
        "A lone runner crosses the finish line in the rain",
        "runner",
        &["finish line", "rain"],
    ),
    (
        "Teachers march through the centre demanding higher pay",
        "Teachers",
        &["centre"],
    ),
    (
        "Snow ploughs clear the motorway after a night of blizzards",
        "Snow ploughs",
        &["motorway"],
    ),
    (
        "Divers inspect the coral reef for signs of bleaching",
        "Divers",
        &["coral reef"],
    ),
    (
        "Election officials count ballots late into the night",
        "Election officials",
        &["ballots"],
    ),
    (
        "A crane lifts the final section onto the tower",
        "crane",
        &["tower"],
    ),
    (
        "Bakers prepare bread before dawn at the village bakery",
        "Bakers",
        &["bread", "bakery"],
    ),
    (
        "Farmworkers harvest grapes under a scorching sun",
        "Farmworkers",
        &["grapes"],
    ),
    (
        "Protesters hold candles during a vigil outside the court",
        "Protesters",
        &["candles"],
    ),
    (
        "Musicians perform on a floating stage at the festival",
        "Musicians",
        &["floating stage"],
    ),
    (
        "Lifeguards watch swimmers from the tower at the lake",
        "Lifeguards",
        &["swimmers", "lake"],
    ),
    (
        "A tractor pulls a trailer of hay across the field",
        "tractor",
        &["hay"],
    ),
    (
        "Nurses rest between shifts in the hospital corridor",
        "Nurses",
        &["corridor"],
    ),
    (
        "Pilots walk across the tarmac before the flight",
        "Pilots",
        &["tarmac"],
    ),
    (
        "Athletes warm up on the track before the heats",
        "Athletes",
        &["track"],
    ),
    (
        "A flock of sheep blocks the mountain road",
        "sheep",
        &["mountain road"],
    ),
    (
        "Voters line up outside the polling station at sunrise",
        "Voters",
        &["polling station"],
    ),
    (
        "Chefs plate dishes in the kitchen of the new restaurant",
        "Chefs",
        &["dishes", "kitchen"],
    ),
    (
        "Streetlights glow over the empty avenue after curfew",
        "Streetlights",
        &["avenue"],
    ),
];

pub const FIXTURE_ENTITY_ID: &str = "Q_Maria_Alvarez";
pub const FIXTURE_ENTITY_NAME: &str = "Maria Alvarez";
const ENTITY_TEXTURE: u32 = 17;

const ENTITY_CAPTIONS: [(&str, &str, &[&str]); 5] = [
    (
        "Maria Alvarez speaks to reporters after the council vote",
        "Maria Alvarez",
        &["reporters"],
    ),
    (
        "Maria Alvarez visits a flooded neighbourhood on the coast",
        "Maria Alvarez",
        &["flooded neighbourhood"],
    ),
    (
        "Supporters cheer as Maria Alvarez arrives at the rally",
        "Maria Alvarez",
        &["Supporters", "rally"],
    ),
    (
        "Maria Alvarez signs the new housing bill into law",
        "Maria Alvarez",
        &["housing bill"],
    ),
    (
        "Maria Alvarez meets nurses at the regional hospital",
        "Maria Alvarez",
        &["nurses", "hospital"],
    ),
];

fn structured_response(main: &str, additional: &[&str]) -> String {
    json!({ "main_subject": main, "additional_subjects": additional }).to_string()
}

fn rewrite_response(caption: &str) -> String {
    let mut chars = caption.chars();
    let lowered: String = chars
        .next()
        .map(|c| c.to_lowercase().chain(chars).collect())
        .unwrap_or_default();
    format!("Generate an image of {lowered}.")
}

/// Scene with one synthetic face of identity `texture` centred at (cx, cy).
fn scene_with_face(
    w: u32,
    h: u32,
    seed: u64,
    texture: u32,
    side: u32,
    cx: u32,
    cy: u32,
) -> RgbImage {
    let mut img = natural_image(w, h, seed);
    draw_face(
        &mut img,
        cx - side / 2,
        cy - side / 2,
        side,
        side,
        &identity_texture(texture),
    );
    img
}

/// What the twenty fixture records are meant to exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureRole {
    NonEntity,
    /// Passes every caption rule, but the image shows a face.
    FaceInImage,
    ShortCaption,
    ExcludedEntity,
    Entity,
}

/// Writes a twenty-record work set under `dir` (captions, images, knowledge
/// snapshot with a reference face, gazetteer, recorded LLM responses and a
/// config file) and returns the config it describes, with `dir/work` as the
/// work directory.
pub fn write_pipeline_fixture(dir: &Path) -> Result<(PipelineConfig, Vec<(String, FixtureRole)>)> {
    let images = dir.join("images");
    let kb = dir.join("kb");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(kb.join("faces"))?;

    let mut records = Vec::new();
    let mut roles = Vec::new();
    let mut responses = RecordedLlmClient::new("recorded-fixture");
    let template = PromptTemplate::for_family(LlmFamily::StructuredJson);
    let rewrite = rewrite_template();
    let mut add = |id: String,
                   caption: &str,
                   img: RgbImage,
                   role: FixtureRole,
                   response: String|
     -> Result<()> {
        let name = format!("{id}.png");
        img.save(images.join(&name))?;
        let mut r = CaptionRecord::new(&id, "fixture", caption);
        r.image_path = Some(name);
        r.article_category_raw = "news".into();
        records.push(r);
        roles.push((id, role));
        responses.insert(template.render(caption), response);
        responses.insert(rewrite.render(caption), rewrite_response(caption));
        Ok(())
    };

    for (i, (caption, main, extra)) in CAPTIONS.iter().take(12).enumerate() {
        // one record gets an unusable response and falls back to the plain caption
        let response = if i == 10 {
            "Sorry, I cannot help with that.".to_string()
        } else {
            structured_response(main, extra)
        };
        add(
            format!("fx{i:02}"),
            caption,
            natural_image(64, 48, 100 + i as u64),
            FixtureRole::NonEntity,
            response,
        )?;
    }
    add(
        "fx12".into(),
        "A nurse smiles at the camera inside the new clinic",
        scene_with_face(64, 48, 112, 5, 18, 32, 24),
        FixtureRole::FaceInImage,
        structured_response("nurse", &["clinic"]),
    )?;
    add(
        "fx13".into(),
        "Rain returns at last",
        natural_image(64, 48, 113),
        FixtureRole::ShortCaption,
        structured_response("Rain", &[]),
    )?;
    add(
        "fx14".into(),
        "Lawmakers debate the budget inside the Senate chamber tonight",
        natural_image(64, 48, 114),
        FixtureRole::ExcludedEntity,
        structured_response("Lawmakers", &["budget"]),
    )?;
    for (i, (caption, main, extra)) in ENTITY_CAPTIONS.iter().enumerate() {
        let cx = 20 + 6 * i as u32;
        add(
            format!("fx{:02}", 15 + i),
            caption,
            scene_with_face(64, 48, 115 + i as u64, ENTITY_TEXTURE, 20, cx, 24),
            FixtureRole::Entity,
            structured_response(main, extra),
        )?;
    }

    let corpus = dir.join("corpus.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&corpus, text)?;

    let reference = {
        let mut img = RgbImage::from_pixel(48, 48, image::Rgb([40, 70, 120]));
        draw_face(&mut img, 10, 10, 28, 28, &identity_texture(ENTITY_TEXTURE));
        img
    };
    reference.save(kb.join("faces").join("maria_alvarez.png"))?;
    KnowledgeSnapshot::from_entities(
        &kb,
        vec![KbEntity {
            entity_id: FIXTURE_ENTITY_ID.into(),
            display_name: FIXTURE_ENTITY_NAME.into(),
            aliases: vec!["Alvarez".into()],
            entity_type: "PERSON".into(),
            popularity: 1.0,
            reference_image: Some("faces/maria_alvarez.png".into()),
        }],
    )
    .write_jsonl(&kb.join("entities.jsonl"))?;

    let gazetteer = dir.join("gazetteer.jsonl");
    let lines = [
        ("Maria Alvarez", "PERSON"),
        ("Alvarez", "PERSON"),
        ("Senate", "ORG"),
        ("Monday", "DATE"),
    ];
    std::fs::write(
        &gazetteer,
        lines
            .iter()
            .map(|(p, l)| format!("{}\n", json!({"phrase": p, "label": l})))
            .collect::<String>(),
    )?;
    let recorded = dir.join("llm_responses.jsonl");
    responses.save(&recorded)?;

    let abs = |p: PathBuf| -> String { std::path::absolute(&p).unwrap_or(p).display().to_string() };
    let text = format!(
        "# twenty-record fixture\n\
         paths.workdir = {}\n\
         paths.corpus = {}\n\
         paths.image_root = {}\n\
         paths.kb_snapshot = {}\n\
         paths.ner_gazetteer = {}\n\
         paths.llm_recorded = {}\n\
         paths.cache = {}\n\
         models.llm = recorded-fixture\n\
         curate.resolution = 32\n\
         curate.split = 0.4,0.2,0.4\n\
         ground.min_samples = 2\n\
         train.epochs = 1\n\
         train.batch_size = 2\n\
         train.learning_rate = 0.001\n\
         generate.resolution = 32\n\
         generate.steps = 10\n\
         eval.face_crop = 16\n",
        abs(dir.join("work")),
        abs(corpus),
        abs(images),
        abs(kb),
        abs(gazetteer),
        abs(recorded),
        abs(dir.join("cache")),
    );
    std::fs::write(dir.join("fixture.conf"), &text)?;
    Ok((PipelineConfig::parse(&text)?, roles))
}

/// Ground truth of one planted record.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRecord {
    pub record: CaptionRecord,
    pub words: usize,
    pub excluded_mention: bool,
    pub low_quality: bool,
    pub face: bool,
    pub image_missing: bool,
}

impl PlantedRecord {
    /// Membership in the entity-free subset by construction.
    pub fn expected_retained(&self, min_words: usize) -> bool {
        self.words >= min_words
            && !self.excluded_mention
            && !self.low_quality
            && !self.face
            && !self.image_missing
    }
}

const FILLER: &[&str] = &[
    "workers",
    "crowd",
    "river",
    "harbour",
    "storm",
    "market",
    "bridge",
    "tower",
    "field",
    "village",
    "street",
    "train",
    "boats",
    "smoke",
    "snow",
    "festival",
    "school",
    "clinic",
    "garden",
    "road",
    "square",
    "night",
    "morning",
    "families",
    "volunteers",
    "flood",
    "station",
    "coast",
    "hills",
    "city",
    "crops",
    "parade",
];

const EXCLUDED_PHRASES: &[(&str, &str)] = &[
    ("Angela Merkel", "PERSON"),
    ("Paris", "GPE"),
    ("Europe", "LOC"),
    ("United Nations", "ORG"),
    ("Mona Lisa", "WORK_OF_ART"),
    ("Tokyo", "GPE"),
    ("Pentagon", "ORG"),
];

/// `n` records with independently planted violations: short captions
/// (including the exact boundary), excluded-type mentions, harmless DATE
/// mentions, low-quality images, faces and missing image files. Images are
/// written under `dir/images`; the corpus goes to `dir/corpus.jsonl`.
pub fn write_planted_corpus(dir: &Path, n: usize, seed: u64) -> Result<Vec<PlantedRecord>> {
    debug_assert!(EXCLUDED_PHRASES
        .iter()
        .all(|(_, l)| DEFAULT_EXCLUDED_TYPES.contains(l)));
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut text = String::new();
    for i in 0..n {
        let id = format!("p{i:04}");
        let words = *[3usize, 4, 5, 5, 6, 6, 7, 8, 9, 10, 11, 12, 14]
            .choose(&mut rng)
            .unwrap_or(&8);
        let excluded_mention = rng.random_bool(0.15);
        let date_mention = rng.random_bool(0.15);
        let low_quality = rng.random_bool(0.15);
        let face = rng.random_bool(0.12);
        let image_missing = rng.random_bool(0.02);

        let mut tokens: Vec<String> = Vec::new();
        if excluded_mention {
            tokens.push(
                EXCLUDED_PHRASES
                    .choose(&mut rng)
                    .map_or("Paris", |p| p.0)
                    .to_string(),
            );
        }
        if date_mention {
            tokens.push("Monday".into());
        }
        let counted = |t: &[String]| crate::text::word_count(&t.join(" "));
        while counted(&tokens) < words {
            tokens.push(FILLER.choose(&mut rng).unwrap_or(&"crowd").to_string());
        }
        let caption = tokens.join(" ");
        let actual_words = crate::text::word_count(&caption);

        let (w, h) = (48, 40);
        let img = if low_quality {
            match rng.random_range(0..3) {
                0 => noise_image(w, h, seed ^ i as u64),
                1 => flat_image(w, h, [90, 110, 140]),
                _ => imageops::blur(&natural_image(w, h, i as u64), 12.0),
            }
        } else {
            natural_image(w, h, 10_000 + i as u64)
        };
        let img = if face {
            let mut img = img;
            draw_face(&mut img, 17, 13, 15, 15, &identity_texture(i as u32));
            img
        } else {
            img
        };
        let name = format!("{id}.png");
        if !image_missing {
            img.save(images.join(&name))?;
        }
        let mut record = CaptionRecord::new(&id, "planted", caption);
        record.image_path = Some(format!("images/{name}"));
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
        out.push(PlantedRecord {
            record,
            words: actual_words,
            excluded_mention,
            low_quality,
            face,
            image_missing,
        });
    }
    std::fs::write(dir.join("corpus.jsonl"), text)?;
    Ok(out)
}

/// Ids of `records` that satisfy every entity-free-subset predicate.
pub fn expected_retained(records: &[PlantedRecord], min_words: usize) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| r.expected_retained(min_words))
        .map(|r| r.record.id.clone())
        .collect()
}
