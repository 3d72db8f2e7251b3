import os
from datetime import date

from pkg_resources import DistributionNotFound, get_distribution

from qkd_twin.cli.qtw import new_parser, run_parser
from qkd_twin.pipeline.templates import QRNG_BOTTOM_UP, SOAK, TX_LOOPBACK, TX_RX_FULL

# -- Project information -----------------------------------------------------
try:
    __version__ = get_distribution("qkd_twin").version
except DistributionNotFound:
    __version__ = "unknown version"

# The full version, including alpha/beta/rc tags
version = __version__
release = __version__

project = "qkd_twin"
author = "qkd_twin developers"
# get current year
current_year = date.today().year
years = range(2023, current_year + 1)
copyright = f"{', '.join(map(str, years))}, {author}"


# -- General configuration ---------------------------------------------------
extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.napoleon",
    "sphinx.ext.mathjax",
    "myst_nb",
]
myst_enable_extensions = ["dollarmath", "substitution"]


def template_block(summary, template):
    return f"""
<details>
<summary>{summary}</summary>

```toml
{template.to_toml()}
```
</details>
"""


myst_substitutions = {
    "qtwrun_help": f"```\n{run_parser.format_help()}```",
    "qtwnew_help": f"```\n{new_parser.format_help()}```",
    "loopback_toml": template_block("TX_LOOPBACK example", TX_LOOPBACK),
    "txrx_toml": template_block("TX_RX_FULL example", TX_RX_FULL),
    "qrng_toml": template_block("QRNG_BOTTOM_UP example", QRNG_BOTTOM_UP),
    "soak_toml": template_block("SOAK example", SOAK),
}
myst_heading_anchors = 2
source_suffix = {".rst": "restructuredtext", ".md": "myst-nb", ".ipynb": "myst-nb"}
nb_execution_mode = "off"

templates_path = ["_templates"]
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

autodoc_typehints = "description"
autodoc_typehints_format = "short"

# -- Options for HTML output -------------------------------------------------

html_title = "QKD Twin"
html_theme = "sphinx_book_theme"
html_theme_options = {
    "path_to_docs": "docs",
    "use_fullscreen_button": False,
}
