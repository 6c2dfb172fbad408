use alloc::format;
use alloc::string::String;

use crate::avu::{BackendStamp, SampleRecord};
use crate::error::{Error, Result};

/// Merges a record's video and audio captions into one audio-visual caption.
pub trait Integrator {
    fn id(&self) -> &str;
    fn version(&self) -> &str;
    fn integrate(&mut self, record: &SampleRecord) -> Result<String>;
}

/// Joins the two captions with a fixed marker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockIntegrator;

impl MockIntegrator {
    pub const JOINER: &'static str = " [AV] ";
}

impl Integrator for MockIntegrator {
    fn id(&self) -> &str {
        "mock"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn integrate(&mut self, record: &SampleRecord) -> Result<String> {
        Ok(format!(
            "{}{}{}",
            record.video_caption.trim(),
            Self::JOINER,
            record.audio_caption.trim()
        ))
    }
}

/// Checks both captions, runs the backend, and returns the caption together
/// with the stamp to store on the record.
pub fn integrate_captions(
    record: &SampleRecord,
    integrator: &mut dyn Integrator,
) -> Result<(String, BackendStamp)> {
    for (name, text) in [
        ("video_caption", &record.video_caption),
        ("audio_caption", &record.audio_caption),
    ] {
        if text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record `{}` has an empty {name}",
                record.id
            )));
        }
    }
    let caption = integrator.integrate(record).map_err(|e| match e {
        e @ Error::Backend { .. } => e,
        other => Error::Backend {
            backend: integrator.id().into(),
            record: record.id.clone(),
            message: format!("{other}"),
            retryable: true,
        },
    })?;
    let stamp = BackendStamp {
        backend: integrator.id().into(),
        version: integrator.version().into(),
    };
    Ok((caption, stamp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_joins_captions() {
        let r = SampleRecord::new("x", "a dog runs", "barking");
        let (c, stamp) = integrate_captions(&r, &mut MockIntegrator).unwrap();
        assert_eq!(c, "a dog runs [AV] barking");
        assert_eq!(integrate_captions(&r, &mut MockIntegrator).unwrap().0, c);
        assert_eq!(stamp.backend, "mock");
    }

    #[test]
    fn empty_audio_caption_is_invalid() {
        let r = SampleRecord::new("x", "a dog runs", "  ");
        assert!(matches!(
            integrate_captions(&r, &mut MockIntegrator),
            Err(Error::Validation(_))
        ));
    }

    struct Flaky;

    impl Integrator for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }
        fn version(&self) -> &str {
            "0"
        }
        fn integrate(&mut self, _: &SampleRecord) -> Result<String> {
            Err(Error::Contract("timeout".into()))
        }
    }

    #[test]
    fn backend_failures_are_retryable_and_name_the_record() {
        let r = SampleRecord::new("rec-9", "v", "a");
        match integrate_captions(&r, &mut Flaky) {
            Err(Error::Backend {
                record, retryable, ..
            }) => {
                assert_eq!(record, "rec-9");
                assert!(retryable);
            }
            other => panic!("{other:?}"),
        }
    }
}
