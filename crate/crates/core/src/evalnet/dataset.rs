use std::path::Path;

use super::{EvalError, MlpSpec};

/// Feature rows with integer class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    features: Vec<Vec<f32>>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self, EvalError> {
        if features.len() != labels.len() {
            return Err(EvalError::Dataset(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            if let Some(i) = features.iter().position(|r| r.len() != first.len()) {
                return Err(EvalError::Dataset(format!("row {i} has a different width")));
            }
        }
        Ok(LabeledDataset { features, labels })
    }

    /// Reads CSV with the class label in the last column. A first row that
    /// does not parse as numbers is taken as a header.
    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self, EvalError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| EvalError::Dataset(e.to_string()))?;
            if record.len() < 2 {
                return Err(EvalError::Dataset(format!("line {}: need features and a label", i + 1)));
            }
            let parsed = parse_row(&record);
            match parsed {
                Some((x, y)) => {
                    features.push(x);
                    labels.push(y);
                }
                None if i == 0 => continue,
                None => return Err(EvalError::Dataset(format!("line {}: not numeric", i + 1))),
            }
        }
        LabeledDataset::new(features, labels)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        LabeledDataset::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (x, y) in self.rows() {
            for v in x {
                out.push_str(&v.to_string());
                out.push(',');
            }
            out.push_str(&y.to_string());
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.first().map(Vec::len)
    }

    pub fn features(&self) -> &[Vec<f32>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f32], usize)> {
        self.features.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// Feature width matches the network input and every label names an
    /// output class.
    pub fn check_against(&self, spec: &MlpSpec) -> Result<(), EvalError> {
        if let Some(d) = self.feature_dim() {
            if d != spec.input_dim() {
                return Err(EvalError::InputDim {
                    expected: spec.input_dim(),
                    actual: d,
                });
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= spec.output_dim()) {
            return Err(EvalError::Dataset(format!(
                "label {y} out of range for {} classes",
                spec.output_dim()
            )));
        }
        Ok(())
    }
}

fn parse_row(record: &csv::StringRecord) -> Option<(Vec<f32>, usize)> {
    let n = record.len();
    let x = record
        .iter()
        .take(n - 1)
        .map(|f| f.parse::<f32>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<_>>>()?;
    let y = record[n - 1].parse::<usize>().ok()?;
    Some((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_optional() {
        let with = LabeledDataset::from_csv_reader("a,b,label\n1,2,0\n3.5,-4,1\n".as_bytes()).unwrap();
        let without = LabeledDataset::from_csv_reader("1,2,0\n3.5,-4,1\n".as_bytes()).unwrap();
        assert_eq!(with, without);
        assert_eq!(with.labels(), &[0, 1]);
        assert_eq!(with.features()[1], vec![3.5, -4.0]);
    }

    #[test]
    fn csv_roundtrip() {
        let d = LabeledDataset::new(vec![vec![0.1, 2.0], vec![-3.0, 1e-7]], vec![2, 0]).unwrap();
        assert_eq!(LabeledDataset::from_csv_reader(d.to_csv().as_bytes()).unwrap(), d);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(LabeledDataset::from_csv_reader("1,2,0\n1,x,1\n".as_bytes()).is_err());
        assert!(LabeledDataset::from_csv_reader("1,2,0\n1,1.5\n".as_bytes()).is_err());
        assert!(LabeledDataset::from_csv_reader("1,2,0\n4,5,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn label_range_checked() {
        let spec = MlpSpec::new(vec![2, 3]).unwrap();
        let d = LabeledDataset::new(vec![vec![0.0, 0.0]], vec![3]).unwrap();
        assert!(d.check_against(&spec).is_err());
        let d = LabeledDataset::new(vec![vec![0.0]], vec![0]).unwrap();
        assert!(d.check_against(&spec).is_err());
    }
}
