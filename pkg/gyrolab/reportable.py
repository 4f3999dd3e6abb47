##########################
# YAML reports
##########################

import typing


class Reportable:
    """
    Object that can describe itself as a plain YAML-serializable dictionary.
    Keys given through `report_override` replace (or extend) the generated ones.
    """

    def __init__(self, report_override: dict | None = None):
        self.report_override = report_override

    def to_yaml_impl(self) -> dict:
        raise NotImplementedError("this function should be implemented by subclass")

    @typing.final
    def to_yaml(self) -> dict:
        y = self.to_yaml_impl()
        if self.report_override is not None:
            for k in self.report_override.keys():
                y[k] = self.report_override[k]

        return y


def write_report(path, content: dict, title: str):
    import yaml  # import yaml only when a report is actually written
    with open(path, "w") as f:
        f.write("#" * (len(title) + 4) + "\n")
        f.write(f"# {title} #\n")
        f.write("#" * (len(title) + 4) + "\n\n")
        yaml.safe_dump(content, f, indent=2, sort_keys=False)
