"""Normalization, stage-direction removal and chat-artifact stripping."""

from speechqformer.evaluation import clean_output
from speechqformer.prompts import builtin_template
from speechqformer.textproc import normalize, remove_actions, strip_chat_artifacts

print(remove_actions("<|speech|> (applause) <|speech|>"))
print(normalize("Hello, World! C'est «très» bien..."))
print(normalize(remove_actions("So (laughter) we went home.")))

# %% a chatty answer loses its connective phrase
print(strip_chat_artifacts("here is the transcribed text: bonjour le monde", ""))

# %% echoed instructions are removed too, then the rest is normalized
tpl = builtin_template(1)
raw = "Sure! Can you translate the speech into French? W03 w17 W20."
print(repr(clean_output(raw, tpl, "fr")))
