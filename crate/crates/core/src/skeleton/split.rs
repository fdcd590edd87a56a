use serde::{Deserialize, Serialize};

use super::SkeletonTensor;
use crate::error::{Error, Result};

/// Performer ids used for training under the cross-subject protocol.
pub const XSUB_TRAIN_SUBJECTS: [u32; 20] = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38];

/// Evaluation protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Cross-subject: training performers vs the rest.
    Xsub,
    /// Cross-view: cameras 2 and 3 train, camera 1 tests.
    Xview,
    /// Cross-view on three-camera data: cameras 1 and 2 train, camera 3 tests.
    NuclaCam,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Xsub => "xsub",
            Protocol::Xview => "xview",
            Protocol::NuclaCam => "nucla-cam",
        }
    }

    /// Whether a sample belongs to the training side.
    pub fn is_train(self, sample: &SkeletonTensor) -> Result<bool> {
        let missing = |what: &str| Error::contract(format!("{} split needs the {what} id of every sample", self.name()));
        Ok(match self {
            Protocol::Xsub => {
                let s = sample.meta.subject.ok_or_else(|| missing("subject"))?;
                XSUB_TRAIN_SUBJECTS.contains(&s)
            }
            Protocol::Xview => sample.meta.camera.ok_or_else(|| missing("camera"))? != 1,
            Protocol::NuclaCam => sample.meta.camera.ok_or_else(|| missing("camera"))? != 3,
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xsub" => Ok(Protocol::Xsub),
            "xview" => Ok(Protocol::Xview),
            "nucla-cam" => Ok(Protocol::NuclaCam),
            other => Err(Error::contract(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Splits samples into `(train, test)`, keeping input order on each side.
pub fn split_protocol(samples: Vec<SkeletonTensor>, protocol: Protocol) -> Result<(Vec<SkeletonTensor>, Vec<SkeletonTensor>)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        if protocol.is_train(&s)? {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}
