//! MovieLens-1M ingestion (`users.dat`, `movies.dat`, `ratings.dat`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{
    binarize, Dataset, EncodedInstance, FeatureSchema, Field, FieldKind, ItemSideInfo, EMPTY_SLOT,
};
use crate::error::{CsdmError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawUser {
    pub id: u32,
    pub gender: String,
    pub age: u32,
    pub occupation: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMovie {
    pub id: u32,
    pub title: String,
    pub year: Option<u32>,
    pub genres: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawRating {
    pub user: u32,
    pub movie: u32,
    pub rating: u8,
    pub timestamp: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RawMovieLens {
    pub users: Vec<RawUser>,
    pub movies: Vec<RawMovie>,
    pub ratings: Vec<RawRating>,
}

fn read_latin1(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CsdmError::io(path, e))?;
    // Latin-1 maps each byte to the code point of the same value.
    Ok(bytes.iter().map(|&b| b as char).collect())
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CsdmError {
    CsdmError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{s}`")))
}

/// Parses one `UserID::MovieID::Rating::Timestamp` line.
pub fn parse_rating_line(path: &Path, line_no: usize, line: &str) -> Result<RawRating> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != 4 {
        return Err(parse_err(
            path,
            line_no,
            format!("expected 4 fields, got {}", parts.len()),
        ));
    }
    Ok(RawRating {
        user: num(path, line_no, "user id", parts[0])?,
        movie: num(path, line_no, "movie id", parts[1])?,
        rating: num(path, line_no, "rating", parts[2])?,
        timestamp: num(path, line_no, "timestamp", parts[3])?,
    })
}

fn parse_user(path: &Path, line_no: usize, line: &str) -> Result<RawUser> {
    let parts: Vec<&str> = line.split("::").collect();
    if parts.len() != 5 {
        return Err(parse_err(
            path,
            line_no,
            format!("expected 5 fields, got {}", parts.len()),
        ));
    }
    Ok(RawUser {
        id: num(path, line_no, "user id", parts[0])?,
        gender: parts[1].trim().to_string(),
        age: num(path, line_no, "age", parts[2])?,
        occupation: num(path, line_no, "occupation", parts[3])?,
    })
}

/// Release year from a title ending in `(YYYY)`.
fn title_year(title: &str) -> Option<u32> {
    let t = title.trim_end();
    let inner = t.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    inner[open + 1..].trim().parse().ok()
}

fn parse_movie(path: &Path, line_no: usize, line: &str) -> Result<RawMovie> {
    // Titles may contain "::"-free text only, but split from both ends anyway.
    let first = line
        .find("::")
        .ok_or_else(|| parse_err(path, line_no, "missing `::`"))?;
    let last = line
        .rfind("::")
        .filter(|&l| l > first)
        .ok_or_else(|| parse_err(path, line_no, "expected 3 fields"))?;
    let id = num(path, line_no, "movie id", &line[..first])?;
    let title = line[first + 2..last].to_string();
    let genres = line[last + 2..]
        .split('|')
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect();
    Ok(RawMovie {
        id,
        year: title_year(&title),
        title,
        genres,
    })
}

/// Reads the three MovieLens-1M tables from `dir`.
pub fn load_movielens(dir: &Path) -> Result<RawMovieLens> {
    let file = |name: &str| -> PathBuf { dir.join(name) };
    let mut raw = RawMovieLens::default();

    let p = file("users.dat");
    let text = read_latin1(&p)?;
    for (n, l) in lines(&text) {
        raw.users.push(parse_user(&p, n, l)?);
    }

    let p = file("movies.dat");
    let text = read_latin1(&p)?;
    for (n, l) in lines(&text) {
        raw.movies.push(parse_movie(&p, n, l)?);
    }

    let p = file("ratings.dat");
    let text = read_latin1(&p)?;
    for (n, l) in lines(&text) {
        let r = parse_rating_line(&p, n, l)?;
        binarize(r.rating).map_err(|e| parse_err(&p, n, e.to_string()))?;
        raw.ratings.push(r);
    }
    if raw.ratings.is_empty() {
        return Err(CsdmError::DatasetEmpty(format!(
            "{} has no ratings",
            p.display()
        )));
    }
    Ok(raw)
}

fn index_of<K: Ord + Clone>(keys: impl Iterator<Item = K>) -> BTreeMap<K, u32> {
    let mut m = BTreeMap::new();
    for k in keys {
        m.entry(k).or_insert(0);
    }
    for (i, v) in m.values_mut().enumerate() {
        *v = i as u32;
    }
    m
}

/// Encodes the raw tables. Side information is `{decade, genres}`; titles
/// are dropped and there are no context fields.
pub fn encode_movielens(raw: &RawMovieLens) -> Result<Dataset> {
    if raw.ratings.is_empty() {
        return Err(CsdmError::DatasetEmpty("no ratings".into()));
    }
    let user_idx = index_of(raw.users.iter().map(|u| u.id));
    let gender_idx = index_of(raw.users.iter().map(|u| u.gender.clone()));
    let age_idx = index_of(raw.users.iter().map(|u| u.age));
    let occ_idx = index_of(raw.users.iter().map(|u| u.occupation));
    let movie_idx = index_of(raw.movies.iter().map(|m| m.id));
    // Decade bucket 0 is reserved for titles without a parsable year.
    let decade_idx: BTreeMap<u32, u32> = index_of(
        raw.movies
            .iter()
            .filter_map(|m| m.year.map(|y| y / 10 * 10)),
    )
    .into_iter()
    .map(|(k, v)| (k, v + 1))
    .collect();
    let genre_idx = index_of(raw.movies.iter().flat_map(|m| m.genres.iter().cloned()));
    let max_genres = raw
        .movies
        .iter()
        .map(|m| m.genres.len())
        .max()
        .unwrap_or(1)
        .max(1);

    let schema = FeatureSchema::new(vec![
        Field::one_hot("user_id", FieldKind::UserId, user_idx.len()),
        Field::one_hot("item_id", FieldKind::ItemId, movie_idx.len()),
        Field::one_hot("gender", FieldKind::UserFeature, gender_idx.len()),
        Field::one_hot("age", FieldKind::UserFeature, age_idx.len()),
        Field::one_hot("occupation", FieldKind::UserFeature, occ_idx.len()),
        Field::one_hot("decade", FieldKind::ItemFeature, decade_idx.len() + 1).side(),
        Field::one_hot("genres", FieldKind::ItemFeature, genre_idx.len().max(1))
            .side()
            .multi(max_genres),
    ])?;

    let users: BTreeMap<u32, [u32; 3]> = raw
        .users
        .iter()
        .map(|u| {
            (
                u.id,
                [
                    gender_idx[&u.gender],
                    age_idx[&u.age],
                    occ_idx[&u.occupation],
                ],
            )
        })
        .collect();
    let mut side = vec![Vec::new(); movie_idx.len()];
    for m in &raw.movies {
        let decade = m.year.map_or(0, |y| decade_idx[&(y / 10 * 10)]);
        let genres: Vec<u32> = if m.genres.is_empty() {
            vec![0]
        } else {
            m.genres.iter().map(|g| genre_idx[g]).collect()
        };
        side[movie_idx[&m.id] as usize] = vec![vec![decade], genres];
    }

    let mut instances = Vec::with_capacity(raw.ratings.len());
    for (n, r) in raw.ratings.iter().enumerate() {
        let (Some(&u), Some(&i)) = (user_idx.get(&r.user), movie_idx.get(&r.movie)) else {
            return Err(CsdmError::Validation(format!(
                "rating #{} references unknown user {} or movie {}",
                n + 1,
                r.user,
                r.movie
            )));
        };
        let uf = users[&r.user];
        let s = &side[i as usize];
        let mut slots = vec![u, i, uf[0], uf[1], uf[2], s[0][0]];
        slots.extend_from_slice(&s[1]);
        slots.resize(schema.total_slots(), EMPTY_SLOT);
        instances.push(EncodedInstance {
            user: u,
            item: i,
            label: binarize(r.rating)?,
            timestamp: r.timestamp,
            slots,
        });
    }

    let dataset = Dataset {
        source: "movielens-1m".into(),
        side_info: ItemSideInfo {
            fields: schema.side_fields(),
            values: side,
        },
        schema,
        instances,
    };
    dataset.validate()?;
    Ok(dataset)
}
