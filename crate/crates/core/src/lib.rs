pub mod build;
pub mod dockerfile;
pub mod fsutil;
pub mod idmap;
pub mod image;
pub mod inject;
pub mod oci;
pub mod registry;
pub mod ownerdb;
pub mod sandbox;
pub mod transcript;

#[cfg(feature = "testing")]
#[doc(hidden)]
pub mod testing;
