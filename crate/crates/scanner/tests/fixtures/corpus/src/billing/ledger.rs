/// Rows keyed by pseudonym only.
pub struct Ledger; // @PersonalData(category=amount)

// Not a marker: @PersonalDataset
