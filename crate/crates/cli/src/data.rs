//! Dataset URIs: a compact way to name a data source on the command line.
//!
//! Three schemes are understood:
//!
//! * `idx:images.idx[,labels.idx]` — IDX tensor files (the MNIST container
//!   format); the optional second path supplies ground-truth labels.
//! * `csv:path[:labelcol]` — a rectangular numeric CSV; `labelcol` is a
//!   0-based column index split off as integer labels. A first line that
//!   fails numeric parsing is treated as a header and skipped.
//! * `blobs:k=..,n=..,d=..[,seed=..][,spread=..][,sep=..]` — `k` synthetic
//!   isotropic Gaussian clusters with `n` samples each in `d` dimensions.
//!   Defaults: `seed=0`, `spread=1.0`, `sep=6.0`.

use std::path::PathBuf;

use jule_core::dataset::{load_csv, load_idx, make_blobs, Dataset};

use crate::AppError;

/// A parsed dataset URI, not yet touched on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Idx {
        images: PathBuf,
        labels: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        label_column: Option<usize>,
    },
    Blobs {
        k: usize,
        n_per: usize,
        d: usize,
        seed: u64,
        spread: f64,
        separation: f64,
    },
}

fn usage(msg: impl Into<String>) -> AppError {
    AppError::Usage(msg.into())
}

impl DataSpec {
    /// Parses a URI string. Syntax problems are usage errors; nothing is
    /// read from disk here.
    pub fn parse(uri: &str) -> Result<Self, AppError> {
        let (scheme, rest) = uri.split_once(':').ok_or_else(|| {
            usage(format!(
                "dataset URI {uri:?} has no scheme; expected idx:, csv:, or blobs:"
            ))
        })?;
        match scheme {
            "idx" => {
                let (images, labels) = match rest.split_once(',') {
                    Some((img, lab)) => (img, Some(lab)),
                    None => (rest, None),
                };
                if images.is_empty() || labels.is_some_and(str::is_empty) {
                    return Err(usage(format!("dataset URI {uri:?} has an empty path")));
                }
                Ok(DataSpec::Idx {
                    images: PathBuf::from(images),
                    labels: labels.map(PathBuf::from),
                })
            }
            "csv" => {
                // The label column is the part after the last ':' only when
                // it parses as an index, so paths containing ':' still work.
                let (path, label_column) = match rest.rsplit_once(':') {
                    Some((head, tail)) => match tail.parse::<usize>() {
                        Ok(col) => (head, Some(col)),
                        Err(_) => (rest, None),
                    },
                    None => (rest, None),
                };
                if path.is_empty() {
                    return Err(usage(format!("dataset URI {uri:?} has an empty path")));
                }
                Ok(DataSpec::Csv {
                    path: PathBuf::from(path),
                    label_column,
                })
            }
            "blobs" => {
                let (mut k, mut n_per, mut d) = (None, None, None);
                let (mut seed, mut spread, mut separation) = (0u64, 1.0f64, 6.0f64);
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let (key, value) = part.split_once('=').ok_or_else(|| {
                        usage(format!("blobs parameter {part:?} is not key=value"))
                    })?;
                    let bad = |what: &str| {
                        usage(format!("blobs parameter {key}={value:?}: expected {what}"))
                    };
                    match key {
                        "k" => k = Some(value.parse::<usize>().map_err(|_| bad("a positive integer"))?),
                        "n" => n_per = Some(value.parse::<usize>().map_err(|_| bad("a positive integer"))?),
                        "d" => d = Some(value.parse::<usize>().map_err(|_| bad("a positive integer"))?),
                        "seed" => seed = value.parse::<u64>().map_err(|_| bad("an unsigned integer"))?,
                        "spread" => spread = value.parse::<f64>().map_err(|_| bad("a number"))?,
                        "sep" => separation = value.parse::<f64>().map_err(|_| bad("a number"))?,
                        _ => {
                            return Err(usage(format!(
                                "unknown blobs parameter {key:?}; expected k, n, d, seed, spread, or sep"
                            )))
                        }
                    }
                }
                match (k, n_per, d) {
                    (Some(k), Some(n_per), Some(d)) => {
                        if k == 0 || n_per == 0 || d == 0 {
                            return Err(usage(format!(
                                "blobs URI {uri:?}: k, n, and d must be positive"
                            )));
                        }
                        Ok(DataSpec::Blobs {
                            k,
                            n_per,
                            d,
                            seed,
                            spread,
                            separation,
                        })
                    }
                    _ => Err(usage(format!("blobs URI {uri:?} must set k=, n=, and d="))),
                }
            }
            other => Err(usage(format!(
                "unknown dataset scheme {other:?}; expected idx, csv, or blobs"
            ))),
        }
    }

    /// Loads the data this spec names. I/O and format problems are runtime
    /// errors.
    pub fn load(&self) -> Result<Dataset, AppError> {
        let ds = match self {
            DataSpec::Idx { images, labels } => load_idx(images, labels.as_deref())?,
            DataSpec::Csv { path, label_column } => {
                let has_header = csv_has_header(path)?;
                load_csv(path, *label_column, has_header)?
            }
            DataSpec::Blobs {
                k,
                n_per,
                d,
                seed,
                spread,
                separation,
            } => make_blobs(*k, *n_per, *d, *spread, *separation, *seed)?,
        };
        Ok(ds)
    }
}

/// Treats the first line as a header exactly when one of its cells fails
/// numeric parsing.
fn csv_has_header(path: &PathBuf) -> Result<bool, AppError> {
    let file = std::fs::File::open(path).map_err(jule_core::Error::from)?;
    let mut first = String::new();
    use std::io::BufRead;
    std::io::BufReader::new(file)
        .read_line(&mut first)
        .map_err(jule_core::Error::from)?;
    Ok(first
        .trim_end()
        .split(',')
        .any(|cell| !cell.trim().is_empty() && cell.trim().parse::<f64>().is_err()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_schemes() {
        assert_eq!(
            DataSpec::parse("idx:img.idx").unwrap(),
            DataSpec::Idx {
                images: "img.idx".into(),
                labels: None
            }
        );
        assert_eq!(
            DataSpec::parse("idx:img.idx,lab.idx").unwrap(),
            DataSpec::Idx {
                images: "img.idx".into(),
                labels: Some("lab.idx".into())
            }
        );
        assert_eq!(
            DataSpec::parse("csv:data.csv").unwrap(),
            DataSpec::Csv {
                path: "data.csv".into(),
                label_column: None
            }
        );
        assert_eq!(
            DataSpec::parse("csv:data.csv:4").unwrap(),
            DataSpec::Csv {
                path: "data.csv".into(),
                label_column: Some(4)
            }
        );
        assert_eq!(
            DataSpec::parse("blobs:k=3,n=30,d=2,seed=1").unwrap(),
            DataSpec::Blobs {
                k: 3,
                n_per: 30,
                d: 2,
                seed: 1,
                spread: 1.0,
                separation: 6.0
            }
        );
        assert_eq!(
            DataSpec::parse("blobs:k=2,n=10,d=4,spread=0.5,sep=3").unwrap(),
            DataSpec::Blobs {
                k: 2,
                n_per: 10,
                d: 4,
                seed: 0,
                spread: 0.5,
                separation: 3.0
            }
        );
    }

    #[test]
    fn rejects_malformed_uris() {
        for uri in [
            "data.csv",
            "ftp:data.csv",
            "idx:",
            "idx:img.idx,",
            "blobs:k=3,n=30",
            "blobs:k=three,n=30,d=2",
            "blobs:k=3;n=30;d=2",
            "blobs:k=3,n=30,d=2,sigma=1",
        ] {
            match DataSpec::parse(uri) {
                Err(AppError::Usage(_)) => {}
                other => panic!("URI {uri:?} should be a usage error, got {other:?}"),
            }
        }
    }

    #[test]
    fn blobs_load_shapes_and_labels() {
        let ds = DataSpec::parse("blobs:k=3,n=5,d=2,seed=7")
            .unwrap()
            .load()
            .unwrap();
        assert_eq!(ds.n_samples(), 15);
        assert_eq!(ds.n_features(), 2);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 5);
    }

    #[test]
    fn csv_header_detection() {
        let dir = tempfile::tempdir().unwrap();
        let with = dir.path().join("with.csv");
        std::fs::write(&with, "x,y,label\n1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        let ds = DataSpec::Csv {
            path: with,
            label_column: Some(2),
        }
        .load()
        .unwrap();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(ds.labels, Some(vec![0, 1]));

        let without = dir.path().join("without.csv");
        std::fs::write(&without, "1.0,2.0\n3.0,4.0\n").unwrap();
        let ds = DataSpec::Csv {
            path: without,
            label_column: None,
        }
        .load()
        .unwrap();
        assert_eq!(ds.n_samples(), 2);
        assert_eq!(ds.labels, None);
    }

    #[test]
    fn missing_file_is_runtime_error() {
        let spec = DataSpec::parse("idx:/no/such/file.idx").unwrap();
        match spec.load() {
            Err(AppError::Runtime(_)) => {}
            other => panic!("expected runtime error, got {other:?}"),
        }
    }
}
