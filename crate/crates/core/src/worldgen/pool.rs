//! Built-in relation and name pools the world generator samples from.

pub(crate) struct RelationSpec {
    pub id: &'static str,
    pub noun: &'static str,
    pub surface_forms: &'static [&'static str],
    pub question_forms: &'static [&'static str],
    /// (object, attribute value) pairs.
    pub objects: &'static [(&'static str, &'static str)],
    pub attr_noun: &'static str,
    pub attr_surface: &'static str,
    pub attr_question: &'static str,
}

pub(crate) const RELATIONS: &[RelationSpec] = &[
    RelationSpec {
        id: "birthplace",
        noun: "birthplace",
        surface_forms: &["{S} was born in {O} .", "{S} is a native of {O} ."],
        question_forms: &["Where was {S} born ?", "What is the birthplace of {S} ?"],
        objects: &[
            ("Lisbon", "Portugal"),
            ("Porto", "Portugal"),
            ("Oslo", "Norway"),
            ("Bergen", "Norway"),
            ("Kyoto", "Japan"),
            ("Osaka", "Japan"),
            ("Lima", "Peru"),
            ("Cusco", "Peru"),
            ("Hamburg", "Germany"),
            ("Munich", "Germany"),
            ("Dakar", "Senegal"),
            ("Perth", "Australia"),
        ],
        attr_noun: "country",
        attr_surface: "{E} is a city in {A} .",
        attr_question: "In which country is {E} ?",
    },
    RelationSpec {
        id: "occupation",
        noun: "occupation",
        surface_forms: &["{S} worked as a {O} .", "{S} was a {O} by profession ."],
        question_forms: &["What was the occupation of {S} ?", "What did {S} work as ?"],
        objects: &[
            ("historian", "humanities"),
            ("philologist", "humanities"),
            ("chemist", "science"),
            ("physicist", "science"),
            ("painter", "arts"),
            ("composer", "arts"),
            ("surgeon", "medicine"),
            ("pharmacist", "medicine"),
            ("lawyer", "law"),
            ("judge", "law"),
            ("engineer", "technology"),
            ("architect", "technology"),
        ],
        attr_noun: "field",
        attr_surface: "The field of a {E} is {A} .",
        attr_question: "In which field does a {E} work ?",
    },
    RelationSpec {
        id: "alma_mater",
        noun: "university",
        surface_forms: &["{S} studied at {O} .", "{S} graduated from {O} ."],
        question_forms: &["Where did {S} study ?", "Which university did {S} attend ?"],
        objects: &[
            ("Heidelberg", "Germany"),
            ("Leipzig", "Germany"),
            ("Leiden", "Netherlands"),
            ("Utrecht", "Netherlands"),
            ("Uppsala", "Sweden"),
            ("Lund", "Sweden"),
            ("Bologna", "Italy"),
            ("Padua", "Italy"),
            ("Salamanca", "Spain"),
            ("Coimbra", "Portugal"),
            ("Oxford", "England"),
            ("Cambridge", "England"),
        ],
        attr_noun: "country",
        attr_surface: "The university of {E} is in {A} .",
        attr_question: "In which country is the university of {E} ?",
    },
    RelationSpec {
        id: "instrument",
        noun: "instrument",
        surface_forms: &["{S} played the {O} .", "{S} was skilled at the {O} ."],
        question_forms: &[
            "Which instrument did {S} play ?",
            "What instrument did {S} master ?",
        ],
        objects: &[
            ("violin", "strings"),
            ("cello", "strings"),
            ("harp", "strings"),
            ("flute", "woodwinds"),
            ("oboe", "woodwinds"),
            ("clarinet", "woodwinds"),
            ("trumpet", "brass"),
            ("horn", "brass"),
            ("tuba", "brass"),
            ("piano", "keyboards"),
            ("organ", "keyboards"),
            ("timpani", "percussion"),
        ],
        attr_noun: "family",
        attr_surface: "The {E} belongs to the {A} family .",
        attr_question: "Which family does the {E} belong to ?",
    },
    RelationSpec {
        id: "language",
        noun: "language",
        surface_forms: &["{S} spoke {O} .", "{S} wrote in {O} ."],
        question_forms: &[
            "Which language did {S} speak ?",
            "What language did {S} write in ?",
        ],
        objects: &[
            ("Spanish", "Romance"),
            ("Italian", "Romance"),
            ("French", "Romance"),
            ("Danish", "Germanic"),
            ("Dutch", "Germanic"),
            ("Swedish", "Germanic"),
            ("Polish", "Slavic"),
            ("Czech", "Slavic"),
            ("Finnish", "Uralic"),
            ("Hungarian", "Uralic"),
            ("Greek", "Hellenic"),
            ("Latin", "Italic"),
        ],
        attr_noun: "branch",
        attr_surface: "{E} is a {A} language .",
        attr_question: "Which branch does {E} belong to ?",
    },
    RelationSpec {
        id: "deathplace",
        noun: "place of death",
        surface_forms: &["{S} died in {O} .", "{S} spent the last years in {O} ."],
        question_forms: &["Where did {S} die ?", "In which city did {S} die ?"],
        objects: &[
            ("Vienna", "Austria"),
            ("Graz", "Austria"),
            ("Prague", "Czechia"),
            ("Brno", "Czechia"),
            ("Geneva", "Switzerland"),
            ("Zurich", "Switzerland"),
            ("Krakow", "Poland"),
            ("Gdansk", "Poland"),
            ("Seville", "Spain"),
            ("Valencia", "Spain"),
            ("Turin", "Italy"),
            ("Naples", "Italy"),
        ],
        attr_noun: "country",
        attr_surface: "{E} is a city in {A} .",
        attr_question: "In which country is {E} ?",
    },
];

pub(crate) const FIRST_NAMES: &[&str] = &[
    "Wilhelm", "Agnes", "Bertil", "Cosima", "Dorian", "Elfrida", "Florian", "Greta", "Henrik",
    "Ilse", "Jorund", "Katja", "Leopold", "Margit", "Nikolai", "Ottilie", "Pieter", "Rosalind",
    "Sigrid", "Tobias", "Ursula", "Valdemar", "Wendelin", "Xaver", "Yolanda", "Zeno", "Anselm",
    "Brunhild", "Casimir", "Dagny", "Emmerich", "Fenna", "Gunnar", "Hedda", "Ivar", "Jutta",
    "Konrad", "Liesel", "Magnus", "Nora", "Oskar", "Petra", "Quirin", "Runa", "Severin", "Thea",
    "Ulrich", "Vera",
];

pub(crate) const SURNAMES: &[&str] = &[
    "Wattenbach",
    "Ahlgren",
    "Brandauer",
    "Castellan",
    "Dreyfuss",
    "Eckhart",
    "Falkner",
    "Grimaldi",
    "Holberg",
    "Ingersoll",
    "Jablonski",
    "Kessler",
    "Lindqvist",
    "Marchetti",
    "Nordahl",
    "Oberlin",
    "Pascoe",
    "Quast",
    "Rasmussen",
    "Stenberg",
    "Thorvald",
    "Uhland",
    "Vasquez",
    "Winterbourne",
    "Yardley",
    "Zellweger",
    "Albrecht",
    "Bergmann",
    "Corvin",
    "Dahlberg",
    "Engstrom",
    "Fontaine",
    "Gottlieb",
    "Hartwig",
    "Isenberg",
    "Jorgensen",
    "Kleist",
    "Lorenzen",
    "Molander",
    "Novak",
    "Ostrander",
    "Pfeiffer",
    "Quandt",
    "Rothstein",
    "Sandoval",
    "Tegner",
    "Ulbrich",
    "Vogler",
];
