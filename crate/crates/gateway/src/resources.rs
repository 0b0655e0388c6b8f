use std::path::Path;
use std::sync::Arc;

use promptveil_core::detect::{BloomFilter, Category};
use promptveil_core::dictionary::{builtin, parse_categorized, parse_gendered, read_text};
use promptveil_core::dp::{EmbeddingTable, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY};
use promptveil_core::pipeline::{build_gazetteer, Pipeline, PolicySet, DEFAULT_NAME_FP, DEFAULT_PLACE_FP};
use promptveil_core::pseudonym::{GenderLexicon, PlaceDictionaries, PseudonymDictionaries};

use crate::config::ResourcePaths;
use crate::GatewayError;

fn text_or(path: Option<&Path>, packaged: &'static str) -> Result<String, GatewayError> {
    match path {
        Some(p) => read_text(p).map_err(|e| GatewayError::Resource(format!("{}: {e}", p.display()))),
        None => Ok(packaged.to_string()),
    }
}

fn resource<T, E: std::fmt::Display>(what: &str, r: Result<T, E>) -> Result<T, GatewayError> {
    r.map_err(|e| GatewayError::Resource(format!("{what}: {e}")))
}

/// Builds the shared pipeline from configured files, falling back to the
/// packaged dictionaries.
pub fn load_pipeline(paths: &ResourcePaths) -> Result<Pipeline, GatewayError> {
    let names_text = text_or(paths.names.as_deref(), builtin::NAMES)?;
    let names = resource("names", parse_gendered(&names_text))?;
    let places = resource("places", parse_categorized(&text_or(paths.places.as_deref(), builtin::PLACES)?))?;
    let pseudo_text = text_or(paths.pseudonyms.as_deref(), builtin::PSEUDONYMS)?;
    let pseudonyms = resource("pseudonyms", PseudonymDictionaries::from_text(&pseudo_text))?;
    let place_pseudonyms = resource(
        "place pseudonyms",
        PlaceDictionaries::from_text(&text_or(paths.place_pseudonyms.as_deref(), builtin::PLACE_PSEUDONYMS)?),
    )?;
    let lexicon = resource(
        "gender lexicon",
        GenderLexicon::from_texts(
            [names_text.as_str(), pseudo_text.as_str()],
            &text_or(paths.pronouns.as_deref(), builtin::PRONOUNS)?,
            &text_or(paths.terms.as_deref(), builtin::TERMS)?,
        ),
    )?;

    let mut gazetteer = match &paths.name_filter {
        Some(_) => resource("gazetteer", build_gazetteer(&[], &places, DEFAULT_NAME_FP, DEFAULT_PLACE_FP))?,
        None => resource("gazetteer", build_gazetteer(&names, &places, DEFAULT_NAME_FP, DEFAULT_PLACE_FP))?,
    };
    if let Some(p) = &paths.name_filter {
        let filter = resource(&p.display().to_string(), BloomFilter::load(p))?;
        gazetteer.add(Category::Name, filter);
    }

    let mut pipeline =
        Pipeline::builtin().with_gazetteer(gazetteer).with_lexicon(lexicon).with_places(place_pseudonyms);
    if let Some(p) = &paths.embedding_table {
        let table = resource(&p.display().to_string(), EmbeddingTable::load(p))?;
        pipeline = pipeline.with_table(Arc::new(table));
    } else if paths.synthetic_table {
        let entries: Vec<(String, _)> = pseudonyms.all().map(|(n, g)| (n.to_string(), g)).collect();
        let table = resource(
            "synthetic table",
            EmbeddingTable::synthetic(entries, DEFAULT_EMBEDDING_DIM, DEFAULT_SYNTHETIC_KEY),
        )?;
        pipeline = pipeline.with_table(Arc::new(table));
    }
    Ok(pipeline.with_pseudonyms(pseudonyms))
}

/// Reads a policy set from JSON, or TOML when the file ends in `.toml`.
pub fn load_policies(path: &Path) -> Result<PolicySet, GatewayError> {
    let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    let set: PolicySet = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?
    };
    set.validate().map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    Ok(set)
}
