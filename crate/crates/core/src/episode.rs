use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

/// One labelled support example: an `H×W×3` image and its mask.
#[derive(Clone, Debug)]
pub struct Shot {
    pub image: Tensor,
    pub mask: Mask,
}

/// A 1-way K-shot task: K labelled supports and one query.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<Shot>,
    pub query_image: Tensor,
    pub query_mask: Option<Mask>,
    /// Dataset-level class id of the episode's foreground.
    pub class_id: usize,
}

impl Episode {
    pub fn new(
        support: Vec<Shot>,
        query_image: Tensor,
        query_mask: Option<Mask>,
        class_id: usize,
    ) -> Result<Self> {
        let e = Self {
            support,
            query_image,
            query_mask,
            class_id,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// `(H, W)` shared by every image of the episode.
    pub fn image_dims(&self) -> (usize, usize) {
        let d = self.query_image.dims();
        (d[0], d[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::dims("Episode", "at least one support shot is required"));
        }
        let qd = self.query_image.dims();
        if qd.len() != 3 || qd[2] != 3 {
            return Err(Error::dims("Episode", format!("query image must be HxWx3, got {qd:?}")));
        }
        let hw = (qd[0], qd[1]);
        for (i, s) in self.support.iter().enumerate() {
            if s.image.dims() != qd {
                return Err(Error::dims(
                    "Episode",
                    format!("support {i} image {:?} differs from query {qd:?}", s.image.dims()),
                ));
            }
            if s.mask.dims() != hw {
                return Err(Error::dims("Episode", format!("support {i} mask dims differ")));
            }
        }
        if let Some(m) = &self.query_mask {
            if m.dims() != hw {
                return Err(Error::dims("Episode", "query mask dims differ"));
            }
        }
        Ok(())
    }
}
